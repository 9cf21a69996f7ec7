//! KL-LUCB confidence bounds for Bernoulli arms.

fn clip(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-16)
}

pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let (p, q) = (clip(p), clip(q));
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// Largest q >= p with KL(p, q) <= level.
pub fn kl_upper(p: f64, level: f64) -> f64 {
    let mut lo = p;
    let mut hi = (p + (level / 2.0).sqrt()).min(1.0);
    while hi - lo > 1e-6 {
        let mid = (lo + hi) / 2.0;
        if kl_bernoulli(p, mid) > level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Smallest q <= p with KL(p, q) <= level.
pub fn kl_lower(p: f64, level: f64) -> f64 {
    let mut hi = p;
    let mut lo = (p - (level / 2.0).sqrt()).max(0.0);
    while hi - lo > 1e-6 {
        let mid = (lo + hi) / 2.0;
        if kl_bernoulli(p, mid) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Exploration rate for round `t` over `arms` arms.
pub fn exploration_rate(arms: usize, t: u64, delta: f64) -> f64 {
    let alpha = 1.1;
    let k = 405.5;
    let temp = (k * arms as f64 * (t as f64).powf(alpha) / delta).ln();
    temp + temp.ln()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ArmStats {
    pub n: u64,
    pub positives: u64,
}

impl ArmStats {
    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.positives as f64 / self.n as f64
        }
    }
}

/// Identifies the `top` arms with highest mean to within `epsilon`. `pull`
/// draws a batch from one arm and returns `(samples, positives)`.
pub fn kl_lucb<E>(
    stats: &mut [ArmStats],
    top: usize,
    epsilon: f64,
    delta: f64,
    batch: u64,
    max_rounds: u64,
    mut pull: impl FnMut(usize, u64) -> Result<(u64, u64), E>,
) -> Result<Vec<usize>, E> {
    let n = stats.len();
    let top = top.min(n);
    for (arm, st) in stats.iter_mut().enumerate() {
        if st.n == 0 {
            let (s, p) = pull(arm, batch)?;
            st.n += s;
            st.positives += p;
        }
    }
    let ranked = |stats: &[ArmStats]| {
        let mut order: Vec<usize> = (0..n).collect();
        // Stable sort keeps lower indices first among equal means.
        order.sort_by(|&a, &b| stats[b].mean().total_cmp(&stats[a].mean()));
        order
    };
    if top == 0 || top == n {
        return Ok(ranked(stats)[..top].to_vec());
    }
    let mut t = 1;
    loop {
        let order = ranked(stats);
        let beta = exploration_rate(n, t, delta);
        let (chosen, rest) = order.split_at(top);
        let lt = *chosen
            .iter()
            .min_by(|&&a, &&b| {
                let la = kl_lower(stats[a].mean(), beta / stats[a].n as f64);
                let lb = kl_lower(stats[b].mean(), beta / stats[b].n as f64);
                la.total_cmp(&lb)
            })
            .expect("nonempty");
        let ut = *rest
            .iter()
            .max_by(|&&a, &&b| {
                let ua = kl_upper(stats[a].mean(), beta / stats[a].n as f64);
                let ub = kl_upper(stats[b].mean(), beta / stats[b].n as f64);
                ua.total_cmp(&ub).then(b.cmp(&a))
            })
            .expect("nonempty");
        let gap = kl_upper(stats[ut].mean(), beta / stats[ut].n as f64)
            - kl_lower(stats[lt].mean(), beta / stats[lt].n as f64);
        if gap <= epsilon || t > max_rounds {
            return Ok(chosen.to_vec());
        }
        for arm in [ut, lt] {
            let (s, p) = pull(arm, batch)?;
            stats[arm].n += s;
            stats[arm].positives += p;
        }
        t += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bounds_bracket_mean() {
        for p in [0.0, 0.1, 0.5, 0.93, 1.0] {
            for level in [0.01, 0.1, 1.0] {
                let (lo, hi) = (kl_lower(p, level), kl_upper(p, level));
                assert!(lo <= p + 1e-12 && p <= hi + 1e-12, "{p} {level} {lo} {hi}");
                assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            }
        }
    }

    #[test]
    fn bounds_tighten_with_samples() {
        let wide = kl_lower(0.9, 3.0 / 10.0);
        let narrow = kl_lower(0.9, 3.0 / 1000.0);
        assert!(narrow > wide);
        assert!(kl_upper(0.5, 3.0 / 1000.0) < kl_upper(0.5, 3.0 / 10.0));
    }

    #[test]
    fn kl_matches_closed_form() {
        let v = 0.3 * (0.3f64 / 0.6).ln() + 0.7 * (0.7f64 / 0.4).ln();
        assert!((kl_bernoulli(0.3, 0.6) - v).abs() < 1e-12);
    }

    #[test]
    fn finds_best_arm() {
        let means = [0.2, 0.5, 0.9, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut stats = vec![ArmStats::default(); 4];
        let best = kl_lucb::<()>(&mut stats, 1, 0.1, 0.05, 32, 10_000, |arm, b| {
            let hits = (0..b).filter(|_| rng.random::<f64>() < means[arm]).count() as u64;
            Ok((b, hits))
        })
        .unwrap();
        assert_eq!(best, vec![2]);
    }
}
