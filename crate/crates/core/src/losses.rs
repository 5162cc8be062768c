//! Counting, uncertainty, ranking and balance losses.
//!
//! All losses are sums over the batch. Every function in [`total_loss`]
//! also returns the derivative of the total with respect to each predicted
//! count, log variance and pooled ranking score, so the network backward
//! pass only has to chain through those scalars. Non-differentiable points
//! (`|0|`, the hinge corner) use the zero subgradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub use_au: bool,
    pub use_rank: bool,
    pub use_ieb: bool,
    pub lambda: f64,
    pub epsilon: f64,
    pub class_bounds: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { use_au: false, use_rank: false, use_ieb: false, lambda: 0.1, epsilon: 0.0, class_bounds: (50.0, 150.0) }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.class_bounds.0 < self.class_bounds.1) {
            return Err(Error::Config(format!("class bounds {:?} must be increasing", self.class_bounds)));
        }
        Ok(())
    }
}

/// The nine rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationRow {
    I,
    Ii,
    Iii,
    Iv,
    V,
    Vi,
    Vii,
    Viii,
    Ix,
}

impl AblationRow {
    pub const ALL: [AblationRow; 9] = [
        AblationRow::I,
        AblationRow::Ii,
        AblationRow::Iii,
        AblationRow::Iv,
        AblationRow::V,
        AblationRow::Vi,
        AblationRow::Vii,
        AblationRow::Viii,
        AblationRow::Ix,
    ];

    pub fn numeral(self) -> &'static str {
        ["i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix"][self as usize]
    }

    pub fn method(self) -> &'static str {
        use AblationRow::*;
        match self {
            I => "UT",
            Ii => "UT+IEB-reg",
            Iii => "UT+AU-reg",
            Iv => "UT+IEB-reg+AU-reg",
            V => "UT+augmented",
            Vi => "MT",
            Vii => "MT+IEB-reg",
            Viii => "MT+AU-reg",
            Ix => "MT+IEB-reg+AU-reg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AblationRow::ALL.into_iter().find(|r| r.numeral().eq_ignore_ascii_case(s))
    }

    pub fn loss_config(self) -> LossConfig {
        use AblationRow::*;
        let (use_au, use_rank, use_ieb) = match self {
            I | V => (false, false, false),
            Ii => (false, false, true),
            Iii => (true, false, false),
            Iv => (true, false, true),
            Vi => (false, true, false),
            Vii => (false, true, true),
            Viii => (true, true, false),
            Ix => (true, true, true),
        };
        LossConfig { use_au, use_rank, use_ieb, ..LossConfig::default() }
    }

    /// Row whose trained weights initialise this one; `None` means fresh.
    pub fn init_from(self) -> Option<AblationRow> {
        use AblationRow::*;
        match self {
            I | Ii | Iii | Iv => None,
            V | Vi => Some(I),
            Vii => Some(Ii),
            Viii | Ix => Some(Iii),
        }
    }

    /// Whether the row trains on the augmented labelled set.
    pub fn augmented(self) -> bool {
        self >= AblationRow::V
    }
}

/// Class 1, 2 or 3 by the default bounds 50 and 150.
pub fn classify_count(c: f64) -> u8 {
    classify_count_with(c, (50.0, 150.0))
}

pub fn classify_count_with(c: f64, bounds: (f64, f64)) -> u8 {
    if c < bounds.0 {
        1
    } else if c < bounds.1 {
        2
    } else {
        3
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Loss(format!("{what}: length mismatch {a} vs {b}")));
    }
    Ok(())
}

fn finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Loss(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn l_count(c: &[f64], c_hat: &[f64]) -> Result<f64> {
    same_len(c.len(), c_hat.len(), "l_count")?;
    if c.is_empty() {
        return Err(Error::Loss("l_count: empty batch".into()));
    }
    Ok(c.iter().zip(c_hat).map(|(a, b)| (a - b).abs()).sum())
}

pub fn l_cau(c: &[f64], c_hat: &[f64], logvar: &[f64]) -> Result<f64> {
    same_len(c.len(), c_hat.len(), "l_cau")?;
    same_len(c.len(), logvar.len(), "l_cau")?;
    finite(logvar, "logvar")?;
    finite(c_hat, "c_hat")?;
    Ok(c.iter().zip(c_hat).zip(logvar).map(|((a, b), s)| (a - b).abs() * (-s).exp() + s).sum())
}

pub fn l_rank(p: &[f64], p_second: &[f64], epsilon: f64) -> Result<f64> {
    same_len(p.len(), p_second.len(), "l_rank")?;
    Ok(p.iter().zip(p_second).map(|(a, b)| (b - a + epsilon).max(0.0)).sum())
}

/// Class frequency weights `-ln(K_class / K)` for a batch.
pub fn ieb_weights(classes: &[u8]) -> Result<Vec<f64>> {
    if classes.is_empty() {
        return Err(Error::Loss("l_ieb: empty batch".into()));
    }
    let k = classes.len() as f64;
    let mut freq = [0usize; 4];
    for &cl in classes {
        if !(1..=3).contains(&cl) {
            return Err(Error::Loss(format!("l_ieb: class {cl} outside 1..=3")));
        }
        freq[cl as usize] += 1;
    }
    Ok(classes.iter().map(|&cl| -(freq[cl as usize] as f64 / k).ln()).collect())
}

pub fn l_ieb(c: &[f64], c_hat: &[f64], classes: &[u8]) -> Result<f64> {
    same_len(c.len(), c_hat.len(), "l_ieb")?;
    same_len(c.len(), classes.len(), "l_ieb")?;
    let w = ieb_weights(classes)?;
    Ok(c.iter().zip(c_hat).zip(&w).map(|((a, b), w)| w * (a - b).abs()).sum())
}

/// Scalar outputs of the counting branch for one labelled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    pub c: f64,
    pub c_hat: f64,
    pub logvar: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_c: f64,
    pub l_cau: f64,
    pub l_r: f64,
    pub l_ieb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleTerm {
    pub c: f64,
    pub c_hat: f64,
    pub logvar: f64,
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub components: LossComponents,
    pub per_sample: Vec<SampleTerm>,
    /// `d total / d c_hat` per labelled sample.
    pub d_c_hat: Vec<f64>,
    /// `d total / d logvar` per labelled sample.
    pub d_logvar: Vec<f64>,
    /// `d total / d p` for the first element of each pair.
    pub d_p_first: Vec<f64>,
    /// `d total / d p'` for the second element of each pair.
    pub d_p_second: Vec<f64>,
}

/// Combined loss for one batch. `pairs` holds the pooled scores `(p, p')`
/// where the first element should score at least as high as the second.
pub fn total_loss(config: &LossConfig, labelled: &[CountPrediction], pairs: &[(f64, f64)]) -> Result<BatchLoss> {
    config.validate()?;
    if labelled.is_empty() {
        return Err(Error::Loss("empty labelled batch".into()));
    }
    if config.use_rank && pairs.is_empty() {
        return Err(Error::Loss("ranking requested but the batch has no pairs".into()));
    }
    let c: Vec<f64> = labelled.iter().map(|s| s.c).collect();
    let c_hat: Vec<f64> = labelled.iter().map(|s| s.c_hat).collect();
    let logvar: Vec<f64> = labelled.iter().map(|s| s.logvar).collect();
    let classes: Vec<u8> = c.iter().map(|&v| classify_count_with(v, config.class_bounds)).collect();
    let p: Vec<f64> = pairs.iter().map(|q| q.0).collect();
    let p2: Vec<f64> = pairs.iter().map(|q| q.1).collect();

    let components = LossComponents {
        l_c: l_count(&c, &c_hat)?,
        l_cau: l_cau(&c, &c_hat, &logvar)?,
        l_r: l_rank(&p, &p2, config.epsilon)?,
        l_ieb: l_ieb(&c, &c_hat, &classes)?,
    };
    let mut total = if config.use_au { components.l_cau } else { components.l_c };
    if config.use_rank {
        total += components.l_r;
    }
    if config.use_ieb {
        total += config.lambda * components.l_ieb;
    }
    if !total.is_finite() {
        return Err(Error::Loss(format!("total loss is not finite ({total})")));
    }

    let weights = ieb_weights(&classes)?;
    let mut d_c_hat = vec![0.0; c.len()];
    let mut d_logvar = vec![0.0; c.len()];
    for k in 0..c.len() {
        let s = sign(c_hat[k] - c[k]);
        if config.use_au {
            let inv = (-logvar[k]).exp();
            d_c_hat[k] = s * inv;
            d_logvar[k] = 1.0 - (c[k] - c_hat[k]).abs() * inv;
        } else {
            d_c_hat[k] = s;
        }
        if config.use_ieb {
            d_c_hat[k] += config.lambda * weights[k] * s;
        }
    }
    let mut d_p_first = vec![0.0; p.len()];
    let mut d_p_second = vec![0.0; p.len()];
    if config.use_rank {
        for k in 0..p.len() {
            if p2[k] - p[k] + config.epsilon > 0.0 {
                d_p_first[k] = -1.0;
                d_p_second[k] = 1.0;
            }
        }
    }
    let per_sample = labelled
        .iter()
        .zip(&classes)
        .map(|(s, &class)| SampleTerm { c: s.c, c_hat: s.c_hat, logvar: s.logvar, class })
        .collect();
    Ok(BatchLoss { total, components, per_sample, d_c_hat, d_logvar, d_p_first, d_p_second })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_fixture() {
        assert_eq!(l_count(&[10.0, 20.0], &[12.0, 17.0]).unwrap(), 5.0);
        assert_eq!(l_count(&[3.0], &[3.0]).unwrap(), 0.0);
        assert!(l_count(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cau_fixture() {
        let v = l_cau(&[10.0], &[6.0], &[2f64.ln()]).unwrap();
        assert!((v - (2.0 + 2f64.ln())).abs() < 1e-12);
        assert!((v - 2.6931).abs() < 1e-4);
        assert_eq!(l_cau(&[5.0], &[5.0], &[0.0]).unwrap(), 0.0);
        assert!(l_cau(&[5.0], &[5.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn rank_fixture() {
        assert!((l_rank(&[0.1], &[0.5], 0.0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(l_rank(&[0.3, 0.2], &[0.3, 0.1], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ieb_fixture() {
        let mut c = vec![10.0; 10];
        c[9] = 200.0;
        let mut c_hat = c.clone();
        c_hat[9] = 195.0;
        let classes: Vec<u8> = c.iter().map(|&v| classify_count(v)).collect();
        let v = l_ieb(&c, &c_hat, &classes).unwrap();
        assert!((v - 5.0 * 10f64.ln()).abs() < 1e-12);
        assert!((v - 11.5129).abs() < 1e-4);
        assert_eq!(l_ieb(&[1.0, 2.0], &[3.0, 0.0], &[1, 1]).unwrap(), 0.0);
        assert!(l_ieb(&[], &[], &[]).is_err());
    }

    #[test]
    fn class_bounds() {
        assert_eq!(classify_count(49.0), 1);
        assert_eq!(classify_count(50.0), 2);
        assert_eq!(classify_count(149.0), 2);
        assert_eq!(classify_count(150.0), 3);
    }

    #[test]
    fn rows_follow_the_table() {
        assert_eq!(AblationRow::I.loss_config(), LossConfig::default());
        let viii = AblationRow::Viii.loss_config();
        assert!(viii.use_au && viii.use_rank && !viii.use_ieb);
        assert_eq!(AblationRow::Vii.init_from(), Some(AblationRow::Ii));
        assert_eq!(AblationRow::Ix.init_from(), Some(AblationRow::Iii));
        assert!(AblationRow::ALL[..4].iter().all(|r| r.init_from().is_none() && !r.augmented()));
        assert_eq!(AblationRow::parse("VIII"), Some(AblationRow::Viii));
    }

    #[test]
    fn row_viii_total_is_cau_plus_rank() {
        let labelled = [CountPrediction { c: 10.0, c_hat: 7.0, logvar: 0.3 }, CountPrediction { c: 60.0, c_hat: 61.0, logvar: -0.2 }];
        let pairs = [(0.5, 0.7), (0.4, 0.1)];
        let b = total_loss(&AblationRow::Viii.loss_config(), &labelled, &pairs).unwrap();
        assert!((b.total - (b.components.l_cau + b.components.l_r)).abs() < 1e-9);
        let b = total_loss(&AblationRow::I.loss_config(), &labelled, &[]).unwrap();
        assert_eq!(b.total, b.components.l_c);
    }

    #[test]
    fn rank_without_pairs_is_an_error() {
        let labelled = [CountPrediction { c: 1.0, c_hat: 1.0, logvar: 0.0 }];
        assert!(total_loss(&AblationRow::Vi.loss_config(), &labelled, &[]).is_err());
    }

    #[test]
    fn perfect_batch_under_row_ix_is_zero() {
        let labelled = [CountPrediction { c: 10.0, c_hat: 10.0, logvar: 0.0 }, CountPrediction { c: 200.0, c_hat: 200.0, logvar: 0.0 }];
        let b = total_loss(&AblationRow::Ix.loss_config(), &labelled, &[(0.5, 0.5), (0.9, 0.2)]).unwrap();
        assert_eq!(b.total, 0.0);
    }
}
