use crate::rules::Predicate;
use crate::sampler::{FeatureVector, Value};
use crate::trees::FeatureSpace;

#[derive(Debug, Clone, PartialEq)]
enum Bins {
    /// Distinct ascending cut points; bin `b` is `(cuts[b-1], cuts[b]]`.
    Numeric(Vec<f64>),
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
struct FeatureBins {
    name: String,
    slot: usize,
    bins: Bins,
}

/// Quantile bins for numeric features, equality for categorical ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretizer {
    features: Vec<FeatureBins>,
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Discretizer {
    /// Cuts each numeric feature of `space` at the interior quantiles of
    /// `data`. Features with a single observed value get no predicate.
    pub fn fit(space: &FeatureSpace, data: &[FeatureVector], n_bins: usize) -> Self {
        let features = space
            .features
            .iter()
            .map(|info| {
                let bins = if info.is_categorical() {
                    Bins::Categorical
                } else {
                    let mut xs: Vec<f64> = data
                        .iter()
                        .filter_map(|f| f.values[info.slot].as_num())
                        .filter(|x| x.is_finite())
                        .collect();
                    xs.sort_by(f64::total_cmp);
                    let mut cuts: Vec<f64> = Vec::new();
                    if !xs.is_empty() && xs[0] < xs[xs.len() - 1] {
                        for b in 1..n_bins.max(1) {
                            let c = percentile(&xs, b as f64 / n_bins as f64);
                            if c < xs[xs.len() - 1] && cuts.last() != Some(&c) {
                                cuts.push(c);
                            }
                        }
                    }
                    Bins::Numeric(cuts)
                };
                FeatureBins {
                    name: info.name.clone(),
                    slot: info.slot,
                    bins,
                }
            })
            .collect();
        Discretizer { features }
    }

    /// One predicate per feature describing the bin that holds `f`.
    pub fn predicates(&self, f: &FeatureVector) -> Vec<(usize, Predicate)> {
        let mut out = Vec::new();
        for fb in &self.features {
            let feature = fb.name.clone();
            match (&fb.bins, &f.values[fb.slot]) {
                (Bins::Categorical, Value::Cat(s)) => out.push((
                    fb.slot,
                    Predicate::In {
                        feature,
                        values: vec![s.to_string()],
                    },
                )),
                (Bins::Numeric(cuts), Value::Num(x)) if !cuts.is_empty() => {
                    let b = cuts.iter().take_while(|c| **c < *x).count();
                    let lo = (b > 0).then(|| (cuts[b - 1], false));
                    let hi = (b < cuts.len()).then(|| (cuts[b], true));
                    if let Some(p) = Predicate::from_bounds(feature, lo, hi) {
                        out.push((fb.slot, p));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn cuts(&self, name: &str) -> Option<&[f64]> {
        self.features
            .iter()
            .find(|f| f.name == name)
            .and_then(|f| match &f.bins {
                Bins::Numeric(c) => Some(c.as_slice()),
                Bins::Categorical => None,
            })
    }
}
