//! Debugging object detectors with probabilistic scenario programs.
//!
//! A scenario program is sampled into feature vectors, each vector is
//! rendered into a scene and scored against a detector, and the labelled
//! data feeds rule learners (decision trees, anchors, activation patterns).
//! A learned rule can be spliced back into the program as `require`
//! statements to generate targeted test scenes.

pub mod anchors;
pub mod detector;
pub mod dsl;
pub mod evaluator;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod rules;
pub mod sampler;
pub mod trees;
pub mod whitebox;
pub mod world;

pub use detector::{Detection, Detector, DetectorOutput, FaultModelConfig, SyntheticDetector};
pub use dsl::{emit, feature_schema, parse, DslError, ScenarioProgram, Schema};
pub use evaluator::{match_and_score, EvaluationConfig, ImageEvaluation, Label, LabeledExample};
pub use pipeline::{PipelineConfig, PipelineError, PipelineReport};
pub use refine::{splice, RefinedProgram};
pub use rules::{Predicate, Provenance, Rule, Target};
pub use sampler::{FeatureVector, Sampler, SamplerConfig, Value};
pub use world::{BoundingBox, Scene};
