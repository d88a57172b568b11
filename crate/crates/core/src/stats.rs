//! Paired significance testing: Shapiro–Wilk normality gate, one-sided
//! paired t-test, and one-sided Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Largest sample for which the Wilcoxon null is enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

/// Baseline and treatment values aligned by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub baseline: Vec<f64>,
    pub treatment: Vec<f64>,
}

impl PairedSample {
    pub fn new(baseline: Vec<f64>, treatment: Vec<f64>) -> Result<Self> {
        if baseline.len() != treatment.len() {
            return Err(Error::Dimension {
                what: "paired sample",
                expected: baseline.len(),
                got: treatment.len(),
            });
        }
        if baseline.len() < 3 {
            return Err(Error::invalid(format!("need at least 3 pairs, got {}", baseline.len())));
        }
        if baseline.iter().chain(&treatment).any(|v| !v.is_finite()) {
            return Err(Error::invalid("paired sample contains non-finite values"));
        }
        Ok(PairedSample { baseline, treatment })
    }

    pub fn len(&self) -> usize {
        self.baseline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baseline.is_empty()
    }

    /// `treatment - baseline`.
    pub fn differences(&self) -> Vec<f64> {
        self.treatment.iter().zip(&self.baseline).map(|(t, b)| t - b).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// Shapiro–Wilk W and p-value using Royston's polynomial approximations of
/// the coefficients and of the null distribution of `log(1 - W)`.
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = sample.len();
    if !(3..=50).contains(&n) {
        return Err(Error::invalid(format!("Shapiro-Wilk needs 3 <= n <= 50, got {n}")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("Shapiro-Wilk sample contains non-finite values"));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range < 1e-19 * x[n - 1].abs().max(1.0) {
        return Err(Error::Degenerate("all values identical; normality is undefined".into()));
    }

    let half = n / 2;
    let an = n as f64;
    // Upper-half coefficients, largest first.
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let norm = std_normal();
        let m: Vec<f64> = (1..=half)
            .map(|i| -norm.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) + m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in first..half {
            a[i] = m[i] / fac;
        }
    }
    // Antisymmetric full coefficient vector aligned with ascending order.
    let mut coef = vec![0.0; n];
    for (i, &ai) in a.iter().enumerate() {
        coef[i] = -ai;
        coef[n - 1 - i] = ai;
    }

    // W as the squared correlation between scaled data and coefficients.
    let xs: Vec<f64> = x.iter().map(|v| v / range).collect();
    let mx = xs.iter().sum::<f64>() / an;
    let ma = coef.iter().sum::<f64>() / an;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (xi, ai) in xs.iter().zip(&coef) {
        let (dx, da) = (xi - mx, ai - ma);
        ssa += da * da;
        ssx += dx * dx;
        sax += da * dx;
    }
    let root = (ssa * ssx).sqrt();
    let w1 = (root - sax) * (root + sax) / (ssa * ssx);
    let w = 1.0 - w1;

    if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        return Ok(ShapiroWilk {
            w,
            p_value: p.clamp(0.0, 1.0),
        });
    }
    let mut y = w1.ln();
    let (mean, sd) = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return Ok(ShapiroWilk { w, p_value: 1e-99 });
        }
        y = -(gamma - y).ln();
        (poly(&C3, an), poly(&C4, an).exp())
    } else {
        let ln_n = an.ln();
        (poly(&C5, ln_n), poly(&C6, ln_n).exp())
    };
    let p = Normal::new(mean, sd).map_err(|e| Error::invalid(e.to_string()))?.sf(y);
    Ok(ShapiroWilk { w, p_value: p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sided paired t-test of `H1: mean(treatment - baseline) > 0`.
/// Zero-variance differences give the degenerate p of 0, 0.5 or 1.
pub fn paired_t_one_sided(pairs: &PairedSample) -> Result<TestOutcome> {
    let d = pairs.differences();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || var.sqrt() <= 1e-15 * mean.abs() {
        let p = if mean > 0.0 {
            0.0
        } else if mean < 0.0 {
            1.0
        } else {
            0.5
        };
        let statistic = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(TestOutcome { statistic, p_value: p });
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TestOutcome {
        statistic: t,
        p_value: dist.sf(t).clamp(0.0, 1.0),
    })
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks of `|d|` for the nonzero differences and the positive-rank sum.
fn signed_ranks(pairs: &PairedSample) -> (Vec<f64>, Vec<bool>) {
    let d: Vec<f64> = pairs.differences().into_iter().filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    (average_ranks(&abs), d.iter().map(|v| *v > 0.0).collect())
}

/// `P(W+ >= observed)` under the sign-flip null, by dynamic programming over
/// doubled ranks (which are integers even with ties).
fn wilcoxon_exact_upper(ranks: &[f64], observed: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let threshold = (2.0 * observed).round() as usize;
    let hits: f64 = counts[threshold.min(total + 1)..].iter().sum();
    hits / 2f64.powi(ranks.len() as i32)
}

/// Normal approximation with tie and continuity corrections.
fn wilcoxon_normal_upper(ranks: &[f64], observed: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 0.5;
    }
    let z = (observed - mean - 0.5) / var.sqrt();
    std_normal().sf(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Auto,
    Exact,
    Normal,
}

/// One-sided Wilcoxon signed-rank test of `H1: treatment > baseline`.
/// Zero differences are dropped; at least five must remain unless all are
/// zero, which gives the degenerate p = 0.5.
pub fn wilcoxon_one_sided(pairs: &PairedSample) -> Result<TestOutcome> {
    wilcoxon_one_sided_with(pairs, WilcoxonMethod::Auto)
}

pub fn wilcoxon_one_sided_with(pairs: &PairedSample, method: WilcoxonMethod) -> Result<TestOutcome> {
    let (ranks, positive) = signed_ranks(pairs);
    if ranks.is_empty() {
        return Ok(TestOutcome {
            statistic: 0.0,
            p_value: 0.5,
        });
    }
    if ranks.len() < 5 {
        return Err(Error::invalid(format!(
            "Wilcoxon needs at least 5 nonzero differences, got {}",
            ranks.len()
        )));
    }
    let w_plus: f64 = ranks.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let exact = match method {
        WilcoxonMethod::Auto => ranks.len() <= WILCOXON_EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p = if exact {
        wilcoxon_exact_upper(&ranks, w_plus)
    } else {
        wilcoxon_normal_upper(&ranks, w_plus)
    };
    Ok(TestOutcome {
        statistic: w_plus,
        p_value: p.clamp(0.0, 1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestUsed {
    PairedT,
    Wilcoxon,
}

/// Report fragment of the gated pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub test_used: TestUsed,
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
    pub n: usize,
    /// `None` when the differences are constant and normality is undefined.
    pub shapiro: Option<ShapiroWilk>,
    pub mean_difference: f64,
}

impl SignificanceReport {
    pub fn hypotheses(&self) -> String {
        format!(
            "H0: mean(baseline) = mean(treatment); H1: mean(baseline) < mean(treatment); {} p = {:.3e} ({} at alpha = {})",
            match self.test_used {
                TestUsed::PairedT => "one-sided paired t-test",
                TestUsed::Wilcoxon => "one-sided Wilcoxon signed-rank test",
            },
            self.p_value,
            if self.significant { "reject H0" } else { "do not reject H0" },
            self.alpha
        )
    }
}

/// Shapiro–Wilk on the differences at `alpha` selects the t-test (normality
/// not rejected) or the Wilcoxon test; the chosen test is then judged at
/// the same `alpha`.
pub fn significance(pairs: &PairedSample, alpha: f64) -> Result<SignificanceReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let d = pairs.differences();
    let mean_difference = d.iter().sum::<f64>() / d.len() as f64;
    let shapiro = match shapiro_wilk(&d) {
        Ok(s) => Some(s),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let normal = shapiro.map_or(true, |s| s.p_value >= alpha);
    let (test_used, outcome) = if normal {
        (TestUsed::PairedT, paired_t_one_sided(pairs)?)
    } else {
        (TestUsed::Wilcoxon, wilcoxon_one_sided(pairs)?)
    };
    Ok(SignificanceReport {
        test_used,
        statistic: outcome.statistic,
        p_value: outcome.p_value,
        alpha,
        significant: outcome.p_value < alpha,
        n: pairs.len(),
        shapiro,
        mean_difference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::stream_rng;
    use rand::Rng;

    fn pairs_from_diffs(d: &[f64]) -> PairedSample {
        PairedSample::new(vec![0.0; d.len()], d.to_vec()).unwrap()
    }

    // Reference values from a widely used scientific Python implementation.
    #[test]
    fn shapiro_matches_reference_values() {
        let cases: Vec<(Vec<f64>, f64, f64)> = vec![
            (
                [-10.0; 5].iter().chain(&[10.0; 5]).copied().collect(),
                0.6552710244620128,
                0.0002539627375607894,
            ),
            (
                vec![0.5, 1.0, 1.5, 2.0, 3.0, 2.2, 1.1, 0.9, 1.7, 2.5],
                0.9740728160820527,
                0.9258263886889464,
            ),
            (
                vec![
                    2.1, 3.4, 1.9, 5.6, 4.4, 3.3, 2.8, 3.9, 4.1, 3.0, 2.2, 6.1, 1.5, 3.7, 4.9, 2.6, 3.1, 4.0, 2.9, 3.5,
                ],
                0.9717316437026791,
                0.7909519454246423,
            ),
            (
                (0..30).map(|i| (-2.0 + 4.0 * i as f64 / 29.0).exp()).collect(),
                0.8099456738090843,
                0.00010005519321987077,
            ),
            (vec![1.0, 2.0, 3.0], 1.0, 1.0),
        ];
        for (x, w, p) in cases {
            let r = shapiro_wilk(&x).unwrap();
            assert!((r.w - w).abs() < 1e-5, "W {} vs {w}", r.w);
            assert!((r.p_value - p).abs() < 1e-4 * p.max(1e-3), "p {} vs {p}", r.p_value);
        }
    }

    #[test]
    fn shapiro_errors_and_range() {
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(matches!(shapiro_wilk(&[3.0; 6]), Err(Error::Degenerate(_))));
        let mut rng = stream_rng(5, 0);
        for n in 3..=50 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let r = shapiro_wilk(&x).unwrap();
            assert!(r.w > 0.0 && r.w <= 1.0 + 1e-12, "n={n} W={}", r.w);
            assert!((0.0..=1.0).contains(&r.p_value));
        }
    }

    #[test]
    fn t_test_examples() {
        let r = paired_t_one_sided(&pairs_from_diffs(&[0.5, 1.0, 1.5, 2.0])).unwrap();
        assert!((r.statistic - 3.872983346207417).abs() < 1e-12);
        assert!((r.p_value - 0.015233145831085489).abs() < 1e-9);
        assert_eq!(paired_t_one_sided(&pairs_from_diffs(&[0.0; 4])).unwrap().p_value, 0.5);
        assert_eq!(paired_t_one_sided(&pairs_from_diffs(&[1.0; 5])).unwrap().p_value, 0.0);
        assert_eq!(paired_t_one_sided(&pairs_from_diffs(&[-1.0; 5])).unwrap().p_value, 1.0);
    }

    /// `P(T_3 >= t)` by Simpson integration of the density, independent of
    /// the distribution library.
    #[test]
    fn t_cdf_matches_numerical_integration() {
        let nu = 3.0f64;
        // Γ(2) / (√(νπ) Γ(3/2)) = 2 / (π √3)
        let c = 2.0 / (std::f64::consts::PI * nu.sqrt());
        let pdf = |t: f64| c * (1.0 + t * t / nu).powf(-(nu + 1.0) / 2.0);
        let t_obs = 3.872983346207417;
        let (a, b, m) = (0.0, t_obs, 20000);
        let h = (b - a) / m as f64;
        let mut s = pdf(a) + pdf(b);
        for k in 1..m {
            s += pdf(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let upper = 0.5 - s * h / 3.0;
        let r = paired_t_one_sided(&pairs_from_diffs(&[0.5, 1.0, 1.5, 2.0])).unwrap();
        assert!((r.p_value - upper).abs() < 1e-9, "{} vs {upper}", r.p_value);
    }

    fn brute_force_upper(ranks: &[f64], observed: f64) -> f64 {
        let n = ranks.len();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
            if s >= observed - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_exact_equals_brute_force() {
        let mut rng = stream_rng(11, 0);
        for n in 5..=12 {
            for trial in 0..10 {
                // rounding on even trials creates ties and zeros
                let d: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = rng.gen::<f64>() * 2.0 - 0.7;
                        if trial % 2 == 0 { (v * 4.0).round() / 4.0 } else { v }
                    })
                    .collect();
                let pairs = pairs_from_diffs(&d);
                let (ranks, pos) = signed_ranks(&pairs);
                if ranks.len() < 5 {
                    continue;
                }
                let w: f64 = ranks.iter().zip(&pos).filter(|(_, p)| **p).map(|(r, _)| r).sum();
                let exact = wilcoxon_one_sided(&pairs).unwrap();
                assert_eq!(exact.statistic, w);
                assert_eq!(exact.p_value, brute_force_upper(&ranks, w));
            }
        }
    }

    #[test]
    fn wilcoxon_examples() {
        let all_pos: Vec<f64> = (1..=10).map(|v| v as f64 * 0.1).collect();
        let r = wilcoxon_one_sided(&pairs_from_diffs(&all_pos)).unwrap();
        assert!((r.p_value - 1.0 / 1024.0).abs() < 1e-15);
        let mirrored: Vec<f64> = all_pos.iter().flat_map(|&v| [v, -v]).collect();
        let r = wilcoxon_one_sided(&pairs_from_diffs(&mirrored)).unwrap();
        // W+ sits at the centre of a symmetric null, so P(W+ >= w) is 0.5
        // plus half the probability of the central atom
        assert!(r.p_value >= 0.5 && r.p_value < 0.55, "{}", r.p_value);
        assert_eq!(wilcoxon_one_sided(&pairs_from_diffs(&[0.0; 6])).unwrap().p_value, 0.5);
        assert!(wilcoxon_one_sided(&pairs_from_diffs(&[1.0, 2.0, 0.0, 0.0, 3.0])).is_err());
    }

    #[test]
    fn wilcoxon_exact_and_normal_agree_at_twenty() {
        let mut rng = stream_rng(12, 0);
        for _ in 0..50 {
            let shift = rng.gen::<f64>() - 0.3;
            let d: Vec<f64> = (0..20).map(|_| rng.gen::<f64>() - 0.5 + shift).collect();
            let pairs = pairs_from_diffs(&d);
            let e = wilcoxon_one_sided_with(&pairs, WilcoxonMethod::Exact).unwrap();
            let a = wilcoxon_one_sided_with(&pairs, WilcoxonMethod::Normal).unwrap();
            assert!((e.p_value - a.p_value).abs() < 0.01, "{} vs {}", e.p_value, a.p_value);
        }
    }

    #[test]
    fn pipeline_gates_on_normality() {
        let bimodal: Vec<f64> = [-10.0; 5].iter().chain(&[10.0; 5]).map(|v| v + 12.0).collect();
        let r = significance(&pairs_from_diffs(&bimodal), DEFAULT_ALPHA).unwrap();
        assert_eq!(r.test_used, TestUsed::Wilcoxon);
        let smooth = [0.5, 1.0, 1.5, 2.0, 3.0, 2.2, 1.1, 0.9, 1.7, 2.5];
        let r = significance(&pairs_from_diffs(&smooth), DEFAULT_ALPHA).unwrap();
        assert_eq!(r.test_used, TestUsed::PairedT);
        assert!(r.significant);
        let same = PairedSample::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let r = significance(&same, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.p_value, 0.5);
        assert!(r.shapiro.is_none());
        let json = serde_json::to_value(&r).unwrap();
        for key in ["test_used", "statistic", "p_value", "alpha", "significant"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn reversed_pairing_is_not_significant() {
        let base = vec![-7.9, -8.1, -7.8, -8.0, -7.95, -8.2, -7.7, -8.05, -7.85, -8.15];
        let treat: Vec<f64> = base.iter().enumerate().map(|(i, b)| b + 1.0 + 0.05 * (i as f64).sin()).collect();
        let fwd = significance(&PairedSample::new(base.clone(), treat.clone()).unwrap(), DEFAULT_ALPHA).unwrap();
        let rev = significance(&PairedSample::new(treat, base).unwrap(), DEFAULT_ALPHA).unwrap();
        assert!(fwd.p_value < 0.01);
        assert!(rev.p_value > 0.5);
    }

    #[test]
    fn paired_sample_validation() {
        assert!(PairedSample::new(vec![1.0; 3], vec![1.0; 4]).is_err());
        assert!(PairedSample::new(vec![1.0; 2], vec![1.0; 2]).is_err());
        assert!(PairedSample::new(vec![1.0, f64::NAN, 0.0], vec![1.0; 3]).is_err());
    }
}
