//! The detector under test: a synthetic detector with planted failure
//! rules, and an adapter for detections produced elsewhere.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::dsl::{Domain, FeatureSource, Schema};
use crate::rng::{mix_words, stream};
use crate::rules::{compile_predicates, CompiledRule, Predicate, RuleError};
use crate::sampler::{FeatureVector, Value};
use crate::world::{BoundingBox, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectorOutput {
    pub detections: Vec<Detection>,
    pub activations: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectorError {
    #[error("no detections recorded for sample {0}")]
    MissingSample(u64),
    #[error("record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("fault model: {0}")]
    Config(String),
}

pub trait Detector: Sync {
    fn detect(&self, scene: &Scene, f: &FeatureVector) -> Result<DetectorOutput, DetectorError>;

    /// Length of the activation vector, when the detector exposes one.
    fn activation_dim(&self) -> Option<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// Drop the affected box with probability `magnitude`.
    Drop,
    /// Multiply the localization jitter by `magnitude`.
    NoiseScale,
    /// Emit an extra box on the affected object with probability `magnitude`.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRule {
    pub predicates: Vec<Predicate>,
    pub effect: Effect,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseNoise {
    /// Standard deviation of per-coordinate box jitter, in pixels.
    pub jitter_sigma: f64,
    pub drop_prob: f64,
}

impl Default for BaseNoise {
    fn default() -> Self {
        BaseNoise {
            jitter_sigma: 0.0,
            drop_prob: 0.0,
        }
    }
}

/// What drives an activation channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CouplingSource {
    /// +1 when failure rule `rule` matches, -1 otherwise.
    Rule { rule: usize },
    /// A feature scaled to [-1, 1] over its domain; categorical features
    /// map to +1 when the value is in `values`.
    Feature {
        feature: String,
        #[serde(default)]
        values: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub channel: usize,
    #[serde(flatten)]
    pub source: CouplingSource,
    pub strength: f64,
}

fn default_dim() -> usize {
    16
}

fn default_activation_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultModelConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub failure_rules: Vec<FailureRule>,
    #[serde(default)]
    pub base_noise: BaseNoise,
    #[serde(default = "default_dim")]
    pub activation_dim: usize,
    /// Standard deviation of the noise added to coupled channels.
    #[serde(default = "default_activation_noise")]
    pub activation_noise: f64,
    /// When absent, channel 0 follows failure rule 0 with strength 3.
    #[serde(default)]
    pub couplings: Option<Vec<Coupling>>,
}

impl Default for FaultModelConfig {
    fn default() -> Self {
        FaultModelConfig {
            seed: 0,
            failure_rules: Vec::new(),
            base_noise: BaseNoise::default(),
            activation_dim: default_dim(),
            activation_noise: default_activation_noise(),
            couplings: None,
        }
    }
}

impl FaultModelConfig {
    pub fn from_toml(text: &str) -> Result<Self, DetectorError> {
        toml::from_str(text).map_err(|e| DetectorError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        serde_json::from_str(text).map_err(|e| DetectorError::Config(e.to_string()))
    }

    /// Reads a `.toml` or `.json` config.
    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path).map_err(|e| DetectorError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    fn effective_couplings(&self) -> Vec<Coupling> {
        match &self.couplings {
            Some(c) => c.clone(),
            None if !self.failure_rules.is_empty() => vec![Coupling {
                channel: 0,
                source: CouplingSource::Rule { rule: 0 },
                strength: 3.0,
            }],
            None => Vec::new(),
        }
    }
}

struct CompiledFailure {
    rule: CompiledRule,
    effect: Effect,
    magnitude: f64,
    /// Objects the effect applies to; empty means every object.
    objects: Vec<String>,
}

enum CompiledSource {
    Rule(usize),
    Numeric { slot: usize, mid: f64, half: f64 },
    Categorical { slot: usize, values: Vec<String> },
}

/// The synthetic fault-injecting detector.
pub struct SyntheticDetector {
    cfg: FaultModelConfig,
    failures: Vec<CompiledFailure>,
    couplings: Vec<(usize, CompiledSource, f64)>,
}

fn objects_of(schema: &Schema, predicates: &[Predicate]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in predicates {
        let Some(desc) = schema.get(p.feature()) else {
            continue;
        };
        let object = match desc.source {
            FeatureSource::Object { index, .. } if index > 0 => {
                desc.name.rsplit_once('.').map(|(o, _)| o.to_string())
            }
            FeatureSource::Derived { .. } => desc
                .name
                .split_once(',')
                .map(|(_, rest)| rest.trim_end_matches(')').to_string()),
            _ => None,
        };
        if let Some(o) = object {
            if !out.contains(&o) {
                out.push(o);
            }
        }
    }
    out
}

impl SyntheticDetector {
    pub fn new(cfg: FaultModelConfig, schema: &Schema) -> Result<Self, DetectorError> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(DetectorError::Config(format!(
                    "{what} must lie in [0, 1], got {p}"
                )))
            }
        };
        prob(cfg.base_noise.drop_prob, "base drop probability")?;
        if cfg.base_noise.jitter_sigma < 0.0 || cfg.activation_noise < 0.0 {
            return Err(DetectorError::Config("noise levels must be non-negative".into()));
        }
        if cfg.activation_dim == 0 {
            return Err(DetectorError::Config("activation_dim must be at least 1".into()));
        }
        let mut failures = Vec::new();
        for (i, fr) in cfg.failure_rules.iter().enumerate() {
            match fr.effect {
                Effect::Drop | Effect::Duplicate => {
                    prob(fr.magnitude, &format!("failure rule {i} magnitude"))?
                }
                Effect::NoiseScale if fr.magnitude < 0.0 => {
                    return Err(DetectorError::Config(format!(
                        "failure rule {i} noise scale must be non-negative"
                    )))
                }
                Effect::NoiseScale => {}
            }
            let rule = compile_predicates(schema, &fr.predicates).map_err(|e| match e {
                RuleError::UnknownFeature(f) => {
                    DetectorError::Config(format!("failure rule {i}: unknown feature `{f}`"))
                }
                other => DetectorError::Config(other.to_string()),
            })?;
            failures.push(CompiledFailure {
                rule,
                effect: fr.effect,
                magnitude: fr.magnitude,
                objects: objects_of(schema, &fr.predicates),
            });
        }
        let mut couplings = Vec::new();
        for c in cfg.effective_couplings() {
            if c.channel >= cfg.activation_dim {
                return Err(DetectorError::Config(format!(
                    "coupling channel {} out of range",
                    c.channel
                )));
            }
            let src = match &c.source {
                CouplingSource::Rule { rule } => {
                    if *rule >= failures.len() {
                        return Err(DetectorError::Config(format!(
                            "coupling refers to missing failure rule {rule}"
                        )));
                    }
                    CompiledSource::Rule(*rule)
                }
                CouplingSource::Feature { feature, values } => {
                    let slot = schema.index_of(feature).ok_or_else(|| {
                        DetectorError::Config(format!("coupling: unknown feature `{feature}`"))
                    })?;
                    match &schema.features[slot].domain {
                        Domain::Values(_) => CompiledSource::Categorical {
                            slot,
                            values: values.clone(),
                        },
                        Domain::Interval { lo, hi } => {
                            let (lo, hi) = if lo.is_finite() && hi.is_finite() {
                                (*lo, *hi)
                            } else {
                                (0.0, 1.0)
                            };
                            CompiledSource::Numeric {
                                slot,
                                mid: (lo + hi) / 2.0,
                                half: ((hi - lo) / 2.0).max(f64::EPSILON),
                            }
                        }
                    }
                }
            };
            couplings.push((c.channel, src, c.strength));
        }
        Ok(SyntheticDetector {
            cfg,
            failures,
            couplings,
        })
    }

    pub fn config(&self) -> &FaultModelConfig {
        &self.cfg
    }

    /// Which failure rules match `f`.
    pub fn matched_rules(&self, f: &FeatureVector) -> Vec<bool> {
        self.failures.iter().map(|r| r.rule.matches(f)).collect()
    }

    fn jitter(bbox: &BoundingBox, sigma: f64, rng: &mut impl Rng) -> BoundingBox {
        if sigma == 0.0 {
            return bbox.clone();
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        let mut b = BoundingBox {
            x_min: bbox.x_min + n.sample(rng),
            y_min: bbox.y_min + n.sample(rng),
            x_max: bbox.x_max + n.sample(rng),
            y_max: bbox.y_max + n.sample(rng),
            object_name: bbox.object_name.clone(),
        };
        if b.x_min > b.x_max {
            std::mem::swap(&mut b.x_min, &mut b.x_max);
        }
        if b.y_min > b.y_max {
            std::mem::swap(&mut b.y_min, &mut b.y_max);
        }
        let mut c = b.clipped();
        if !c.is_valid() {
            // Keep a one-pixel box inside the frame rather than an empty one.
            c.x_max = (c.x_min + 1.0).min(crate::world::FRAME_WIDTH);
            c.x_min = c.x_max - 1.0;
            c.y_max = (c.y_min + 1.0).min(crate::world::FRAME_HEIGHT);
            c.y_min = c.y_max - 1.0;
        }
        c
    }
}

fn value_words(f: &FeatureVector) -> impl Iterator<Item = u64> + '_ {
    f.values.iter().map(|v| match v {
        Value::Num(x) => x.to_bits(),
        Value::Cat(s) => s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3)
        }),
    })
}

impl Detector for SyntheticDetector {
    fn detect(&self, scene: &Scene, f: &FeatureVector) -> Result<DetectorOutput, DetectorError> {
        let key = mix_words(self.cfg.seed, value_words(f));
        let mut rng = stream(key, f.seed_index);
        let matched = self.matched_rules(f);
        let applies =
            |r: &CompiledFailure, object: &str| r.objects.is_empty() || r.objects.iter().any(|o| o == object);
        let sigma = self.cfg.base_noise.jitter_sigma;
        let mut detections = Vec::new();
        for gt in scene.ground_truth_boxes() {
            let mut keep = 1.0 - self.cfg.base_noise.drop_prob;
            let mut scale = 1.0;
            let mut no_dup = 1.0;
            for (r, m) in self.failures.iter().zip(&matched) {
                if !*m || !applies(r, &gt.object_name) {
                    continue;
                }
                match r.effect {
                    Effect::Drop => keep *= 1.0 - r.magnitude,
                    Effect::NoiseScale => scale *= r.magnitude,
                    Effect::Duplicate => no_dup *= 1.0 - r.magnitude,
                }
            }
            let u_drop: f64 = rng.random();
            let u_dup: f64 = rng.random();
            if u_drop >= keep {
                continue;
            }
            detections.push(Detection {
                bbox: Self::jitter(&gt, sigma * scale, &mut rng),
                confidence: 1.0,
            });
            if u_dup >= no_dup {
                let mut dup = Self::jitter(&gt, sigma.max(1.0), &mut rng);
                // Offset the duplicate slightly so it never coincides exactly
                // with the primary box.
                let shift = 0.05 * gt.width();
                dup.x_min = (dup.x_min + shift).min(crate::world::FRAME_WIDTH - 1.0);
                dup.x_max = (dup.x_max + shift).min(crate::world::FRAME_WIDTH);
                detections.push(Detection {
                    bbox: dup,
                    confidence: 0.9,
                });
            }
        }
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut pre = vec![f64::NAN; self.cfg.activation_dim];
        for (ch, src, strength) in &self.couplings {
            let signal = match src {
                CompiledSource::Rule(i) => {
                    if matched[*i] {
                        1.0
                    } else {
                        -1.0
                    }
                }
                CompiledSource::Numeric { slot, mid, half } => {
                    ((f.values[*slot].as_num().unwrap_or(*mid) - mid) / half).clamp(-1.0, 1.0)
                }
                CompiledSource::Categorical { slot, values } => match f.values[*slot].as_cat() {
                    Some(s) if values.iter().any(|v| v == s) => 1.0,
                    _ => -1.0,
                },
            };
            let slot = &mut pre[*ch];
            *slot = if slot.is_nan() { 0.0 } else { *slot } + strength * signal;
        }
        let activations = pre
            .into_iter()
            .map(|p| {
                let e: f64 = noise.sample(&mut rng);
                if p.is_nan() {
                    e.tanh()
                } else {
                    (p + self.cfg.activation_noise * e).tanh()
                }
            })
            .collect();
        Ok(DetectorOutput {
            detections,
            activations: Some(activations),
        })
    }

    fn activation_dim(&self) -> Option<usize> {
        Some(self.cfg.activation_dim)
    }
}

/// Detections produced by an external detector, keyed by seed index.
pub struct ExternalDetections {
    outputs: BTreeMap<u64, DetectorOutput>,
    activation_dim: Option<usize>,
}

fn parse_record(record: usize, line: &str) -> Result<(u64, DetectorOutput), DetectorError> {
    let err = |message: String| DetectorError::Parse { record, message };
    let j: Json = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let index = j
        .get("_seedIndex")
        .and_then(Json::as_u64)
        .ok_or_else(|| err("missing or invalid `_seedIndex`".into()))?;
    let mut detections = Vec::new();
    let dets = match j.get("detections") {
        None | Some(Json::Null) => Vec::new(),
        Some(Json::Array(a)) => a.clone(),
        Some(_) => return Err(err("`detections` must be an array".into())),
    };
    for (k, d) in dets.iter().enumerate() {
        let coords: Vec<f64> = d
            .get("box")
            .and_then(Json::as_array)
            .map(|a| a.iter().filter_map(Json::as_f64).collect())
            .unwrap_or_default();
        if coords.len() != 4 {
            return Err(err(format!("detection {k}: `box` must be [x0, y0, x1, y1]")));
        }
        let bbox = BoundingBox::new(coords[0], coords[1], coords[2], coords[3]);
        if !bbox.is_valid() {
            return Err(err(format!(
                "detection {k}: malformed box, need xMin < xMax and yMin < yMax"
            )));
        }
        let confidence = d.get("confidence").and_then(Json::as_f64).unwrap_or(1.0);
        if !(0.0..=1.0).contains(&confidence) {
            return Err(err(format!("detection {k}: confidence outside [0, 1]")));
        }
        detections.push(Detection { bbox, confidence });
    }
    let activations = match j.get("activations") {
        None | Some(Json::Null) => None,
        Some(Json::Array(a)) => Some(
            a.iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| err("activations must be numbers".into()))
                })
                .collect::<Result<Vec<f64>, _>>()?,
        ),
        Some(_) => return Err(err("`activations` must be an array".into())),
    };
    Ok((
        index,
        DetectorOutput {
            detections,
            activations,
        },
    ))
}

impl ExternalDetections {
    pub fn parse(text: &str) -> Result<Self, DetectorError> {
        let mut outputs = BTreeMap::new();
        let mut dim: Option<Option<usize>> = None;
        for (record, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let (index, out) = parse_record(record, line)?;
            let this = out.activations.as_ref().map(Vec::len);
            match dim {
                None => dim = Some(this),
                Some(d) if d != this => {
                    return Err(DetectorError::Parse {
                        record,
                        message: "activation length differs from earlier records".into(),
                    })
                }
                Some(_) => {}
            }
            outputs.insert(index, out);
        }
        Ok(ExternalDetections {
            outputs,
            activation_dim: dim.flatten(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path).map_err(|e| DetectorError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&DetectorOutput> {
        self.outputs.get(&index)
    }
}

impl Detector for ExternalDetections {
    fn detect(&self, _scene: &Scene, f: &FeatureVector) -> Result<DetectorOutput, DetectorError> {
        self.outputs
            .get(&f.seed_index)
            .cloned()
            .ok_or(DetectorError::MissingSample(f.seed_index))
    }

    fn activation_dim(&self) -> Option<usize> {
        self.activation_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::sampler::{Sampler, SamplerConfig};
    use crate::world::realize;

    const SCN: &str = "ego = car(x: 0, y: 0, heading: 0)
c = car(x: uniform(-3, 3), y: uniform(5, 20))
require visibleFrom(ego, c)
";

    fn region() -> Vec<Predicate> {
        vec![
            Predicate::Le {
                feature: "dist(ego,c)".into(),
                value: 9.0,
            },
            Predicate::In {
                feature: "c.model".into(),
                values: vec!["PRANGER".into()],
            },
        ]
    }

    #[test]
    fn identity_fault_model_reproduces_ground_truth() {
        let s = Sampler::new(&parse(SCN).unwrap());
        let d = SyntheticDetector::new(FaultModelConfig::default(), s.schema()).unwrap();
        for f in s.sample(50, &SamplerConfig::with_seed(1)).unwrap() {
            let scene = realize(s.schema(), &f, s.cone());
            let out = d.detect(&scene, &f).unwrap();
            let gt = scene.ground_truth_boxes();
            assert_eq!(out.detections.len(), gt.len());
            for (det, g) in out.detections.iter().zip(&gt) {
                assert_eq!(&det.bbox, g);
                assert_eq!(det.confidence, 1.0);
            }
            assert_eq!(out, d.detect(&scene, &f).unwrap());
        }
    }

    #[test]
    fn total_drop() {
        let s = Sampler::new(&parse(SCN).unwrap());
        let cfg = FaultModelConfig {
            failure_rules: vec![FailureRule {
                predicates: vec![],
                effect: Effect::Drop,
                magnitude: 1.0,
            }],
            ..FaultModelConfig::default()
        };
        let d = SyntheticDetector::new(cfg, s.schema()).unwrap();
        for f in s.sample(20, &SamplerConfig::with_seed(2)).unwrap() {
            let scene = realize(s.schema(), &f, s.cone());
            assert!(d.detect(&scene, &f).unwrap().detections.is_empty());
        }
    }

    #[test]
    fn planted_drop_frequency() {
        let s = Sampler::new(&parse(SCN).unwrap());
        let cfg = FaultModelConfig {
            failure_rules: vec![FailureRule {
                predicates: region(),
                effect: Effect::Drop,
                magnitude: 0.95,
            }],
            ..FaultModelConfig::default()
        };
        let d = SyntheticDetector::new(cfg, s.schema()).unwrap();
        let rule = compile_predicates(s.schema(), &region()).unwrap();
        let tests = rule.slot_tests(s.schema().len());
        let mut dropped = 0;
        for i in 0..1000 {
            let f = s.sample_with(3, i, &tests, 10_000).unwrap();
            let scene = realize(s.schema(), &f, s.cone());
            if d.detect(&scene, &f).unwrap().detections.is_empty() {
                dropped += 1;
            }
        }
        let freq = dropped as f64 / 1000.0;
        assert!((freq - 0.95).abs() <= 0.03, "drop frequency {freq}");
    }

    #[test]
    fn external_records() {
        assert!(ExternalDetections::parse("").unwrap().is_empty());
        let two = "{\"_seedIndex\": 3, \"detections\": [{\"box\": [0, 0, 10, 10], \"confidence\": 0.7}], \"activations\": [0.5, -1]}\n{\"_seedIndex\": 5, \"detections\": [], \"activations\": [1, 2]}\n";
        let e = ExternalDetections::parse(two).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.get(3).unwrap().detections[0].confidence, 0.7);
        assert_eq!(e.activation_dim(), Some(2));
        let bad = "{\"_seedIndex\": 0, \"detections\": []}\n{\"_seedIndex\": 1, \"detections\": [{\"box\": [5, 0, 5, 10]}]}";
        match ExternalDetections::parse(bad) {
            Err(DetectorError::Parse { record, .. }) => assert_eq!(record, 1),
            other => panic!("expected parse error, got {:?}", other.err()),
        }
    }

    #[test]
    fn rule_channel_tracks_match_status() {
        let s = Sampler::new(&parse(SCN).unwrap());
        let cfg = FaultModelConfig {
            failure_rules: vec![FailureRule {
                predicates: region(),
                effect: Effect::Drop,
                magnitude: 0.95,
            }],
            ..FaultModelConfig::default()
        };
        let d = SyntheticDetector::new(cfg, s.schema()).unwrap();
        for f in s.sample(300, &SamplerConfig::with_seed(8)).unwrap() {
            let scene = realize(s.schema(), &f, s.cone());
            let a = d.detect(&scene, &f).unwrap().activations.unwrap();
            assert_eq!(a.len(), 16);
            assert_eq!(a[0] >= 0.0, d.matched_rules(&f)[0]);
        }
    }

    #[test]
    fn toml_config() {
        let cfg = FaultModelConfig::from_toml(
            r#"
seed = 4
[base_noise]
jitter_sigma = 12.5
[[failure_rules]]
effect = "drop"
magnitude = 0.95
predicates = [
  { op = "le", feature = "dist(ego,c)", value = 9.0 },
  { op = "in", feature = "c.model", values = ["PRANGER"] },
]
[[couplings]]
channel = 2
rule = 0
strength = 4.0
"#,
        )
        .unwrap();
        assert_eq!(cfg.failure_rules[0].predicates, region());
        assert_eq!(cfg.base_noise.jitter_sigma, 12.5);
        assert_eq!(cfg.couplings.unwrap()[0].source, CouplingSource::Rule { rule: 0 });
    }
}
