//! Weighted BCE, asymmetric loss and their combination.
//!
//! All losses take probabilities `p` (post-sigmoid) and clamp them to
//! `[1e-12, 1 - 1e-12]` internally, so `log p` and `log(1 - p)` stay finite at
//! saturation. This clamp is the only place logs are guarded. Every loss is a
//! class-sum for one study; batch reduction (mean over studies) happens in the
//! training loop.
//!
//! Two independent routes are provided: closed-form values and gradients with
//! respect to `p` ([`loss_and_grad`]), and a tape-recorded graph from logits
//! ([`loss_on_tape`]) used for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Lower/upper clamp applied to probabilities inside every loss.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Bce,
    Wbce,
    Asl,
    Combined,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::Bce),
            "wbce" => Ok(Self::Wbce),
            "asl" => Ok(Self::Asl),
            "combined" | "wbce+asl" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown loss mode {other}"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bce => "bce",
            Self::Wbce => "wbce",
            Self::Asl => "asl",
            Self::Combined => "combined",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    /// Per-class positive ratio.
    pub rho: Vec<f64>,
    pub mode: LossMode,
}

impl LossConfig {
    /// Defaults: γ+ = 1, γ− = 4, m = 0.05, combined mode.
    pub fn new(rho: Vec<f64>) -> Self {
        Self {
            gamma_pos: 1.0,
            gamma_neg: 4.0,
            margin: 0.05,
            rho,
            mode: LossMode::Combined,
        }
    }

    pub fn with_mode(mut self, mode: LossMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Config(format!(
                "focusing exponents must be >= 0 (got {}, {})",
                self.gamma_pos, self.gamma_neg
            )));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, 1)", self.margin)));
        }
        if self.rho.len() != classes {
            return Err(Error::Config(format!(
                "rho has {} entries for {classes} classes",
                self.rho.len()
            )));
        }
        if self.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("rho entries must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `(γ+, γ−, m)` actually used by the configured mode.
    fn shape_params(&self) -> (f64, f64, f64) {
        match self.mode {
            LossMode::Bce | LossMode::Wbce => (0.0, 0.0, 0.0),
            LossMode::Asl | LossMode::Combined => (self.gamma_pos, self.gamma_neg, self.margin),
        }
    }

    fn weighted(&self) -> bool {
        matches!(self.mode, LossMode::Wbce | LossMode::Combined)
    }
}

/// Per-class training targets: hard or soft values plus a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Target {
    pub fn hard(labels: &[u8]) -> Self {
        Self {
            y: labels.iter().map(|&l| l as f64).collect(),
            mask: vec![true; labels.len()],
        }
    }

    pub fn soft(y: Vec<f64>) -> Self {
        let mask = vec![true; y.len()];
        Self { y, mask }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// ρ_i = positives / valid hard labels of class i; 0.5 when a class has none.
pub fn positive_ratio(targets: &[Target], classes: usize) -> Vec<f64> {
    let mut pos = vec![0usize; classes];
    let mut valid = vec![0usize; classes];
    for t in targets {
        for i in 0..classes.min(t.len()) {
            if t.mask[i] && (t.y[i] == 0.0 || t.y[i] == 1.0) {
                valid[i] += 1;
                if t.y[i] == 1.0 {
                    pos[i] += 1;
                }
            }
        }
    }
    pos.iter()
        .zip(&valid)
        .map(|(&p, &v)| if v == 0 { 0.5 } else { p as f64 / v as f64 })
        .collect()
}

/// Class weight `y·e^{1-ρ} + (1-y)·e^{ρ}`.
pub fn class_weight(y: f64, rho: f64) -> f64 {
    y * (1.0 - rho).exp() + (1.0 - y) * rho.exp()
}

fn check_inputs(p: &[f64], t: &Target) -> Result<()> {
    if p.len() != t.len() || t.mask.len() != t.y.len() {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("{} probabilities for {} targets", p.len(), t.len()),
        });
    }
    if let Some(bad) = p.iter().chain(&t.y).find(|v| v.is_nan()) {
        return Err(Error::Domain {
            op: "loss",
            detail: format!("NaN input ({bad})"),
        });
    }
    if let Some(bad) = t.y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "loss",
            detail: format!("target {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Shared core: `-Σ w_i [(1-p)^{γ+} y log p + p_m^{γ−} (1-y) log(1-p_m)]`
/// and its derivative with respect to each `p_i`.
fn core(p: &[f64], t: &Target, gp: f64, gn: f64, m: f64, w: &[f64]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        if !t.mask[i] {
            continue;
        }
        let raw = p[i];
        let pc = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = t.y[i];
        let q = 1.0 - pc;
        let pos = q.powf(gp) * pc.ln();
        let pm = (pc - m).max(0.0);
        let neg = pm.powf(gn) * (1.0 - pm).ln();
        total += w[i] * (y * pos + (1.0 - y) * neg);

        let inside = (PROB_EPS..=1.0 - PROB_EPS).contains(&raw);
        if inside {
            let dpos = if gp == 0.0 { 0.0 } else { -gp * q.powf(gp - 1.0) * pc.ln() } + q.powf(gp) / pc;
            let dneg = if pc - m >= 0.0 {
                let lead = if gn == 0.0 || (pm == 0.0 && gn < 1.0) {
                    0.0
                } else {
                    gn * pm.powf(gn - 1.0) * (1.0 - pm).ln()
                };
                lead - pm.powf(gn) / (1.0 - pm)
            } else {
                0.0
            };
            grad[i] = -w[i] * (y * dpos + (1.0 - y) * dneg);
        }
    }
    (-total, grad)
}

fn weights_for(t: &Target, rho: &[f64], weighted: bool) -> Vec<f64> {
    if weighted {
        t.y.iter().zip(rho).map(|(&y, &r)| class_weight(y, r)).collect()
    } else {
        vec![1.0; t.len()]
    }
}

/// Value and `∂L/∂p` of the loss selected by `cfg.mode`.
pub fn loss_and_grad(p: &[f64], t: &Target, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_inputs(p, t)?;
    cfg.validate(p.len())?;
    let (gp, gn, m) = cfg.shape_params();
    let w = weights_for(t, &cfg.rho, cfg.weighted());
    Ok(core(p, t, gp, gn, m, &w))
}

/// Weighted binary cross-entropy.
pub fn wbce(p: &[f64], t: &Target, rho: &[f64]) -> Result<f64> {
    let cfg = LossConfig::new(rho.to_vec()).with_mode(LossMode::Wbce);
    loss_and_grad(p, t, &cfg).map(|(l, _)| l)
}

/// Asymmetric loss with the focusing exponents and margin of `cfg`.
pub fn asl(p: &[f64], t: &Target, cfg: &LossConfig) -> Result<f64> {
    let cfg = LossConfig {
        mode: LossMode::Asl,
        ..cfg.clone()
    };
    loss_and_grad(p, t, &cfg).map(|(l, _)| l)
}

/// Weighted BCE combined with the asymmetric loss.
pub fn combined(p: &[f64], t: &Target, cfg: &LossConfig) -> Result<f64> {
    let cfg = LossConfig {
        mode: LossMode::Combined,
        ..cfg.clone()
    };
    loss_and_grad(p, t, &cfg).map(|(l, _)| l)
}

/// The combined form with caller-supplied class weights.
pub fn weighted_asl(p: &[f64], t: &Target, cfg: &LossConfig, weights: &[f64]) -> Result<f64> {
    check_inputs(p, t)?;
    if weights.len() != p.len() {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("{} weights for {} classes", weights.len(), p.len()),
        });
    }
    Ok(core(p, t, cfg.gamma_pos, cfg.gamma_neg, cfg.margin, weights).0)
}

/// The configured loss with soft targets substituted for `y` everywhere.
pub fn loss_with_soft_labels(p: &[f64], soft_y: &[f64], cfg: &LossConfig) -> Result<f64> {
    let t = Target::soft(soft_y.to_vec());
    loss_and_grad(p, &t, cfg).map(|(l, _)| l)
}

/// Record the configured loss on a tape, starting from a `[C]` logit vector.
pub fn loss_on_tape(tape: &Tape, logits: Var, t: &Target, cfg: &LossConfig) -> Result<Var> {
    let c = t.len();
    if tape.shape(logits) != [c] {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("logits {:?} for {c} targets", tape.shape(logits)),
        });
    }
    if let Some(bad) = t.y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "loss",
            detail: format!("target {bad} outside [0, 1]"),
        });
    }
    cfg.validate(c)?;
    let (gp, gn, m) = cfg.shape_params();
    let w = weights_for(t, &cfg.rho, cfg.weighted());
    let coef_pos: Vec<f64> = (0..c)
        .map(|i| if t.mask[i] { -w[i] * t.y[i] } else { 0.0 })
        .collect();
    let coef_neg: Vec<f64> = (0..c)
        .map(|i| if t.mask[i] { -w[i] * (1.0 - t.y[i]) } else { 0.0 })
        .collect();

    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, Some(PROB_EPS), Some(1.0 - PROB_EPS))?;
    let mut pos = tape.log(p)?;
    if gp != 0.0 {
        let focus = tape.powf(tape.one_minus(p)?, gp)?;
        pos = tape.mul(focus, pos)?;
    }
    let pm = if m != 0.0 {
        tape.clamp(tape.add_scalar(p, -m)?, Some(0.0), None)?
    } else {
        p
    };
    let mut neg = tape.log(tape.one_minus(pm)?)?;
    if gn != 0.0 {
        let focus = tape.powf(pm, gn)?;
        neg = tape.mul(focus, neg)?;
    }
    let a = tape.mul(pos, tape.constant(Tensor::from_vec(coef_pos)))?;
    let b = tape.mul(neg, tape.constant(Tensor::from_vec(coef_neg)))?;
    tape.sum(tape.add(a, b)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn positive_ratio_counts() {
        let rows = |v: &[u8]| v.iter().map(|&x| Target::hard(&[x])).collect::<Vec<_>>();
        assert_eq!(positive_ratio(&rows(&[1, 1, 0, 0]), 1), vec![0.5]);
        assert_eq!(positive_ratio(&rows(&[1, 1, 1, 0]), 1), vec![0.75]);
        let masked = Target {
            y: vec![1.0],
            mask: vec![false],
        };
        assert_eq!(positive_ratio(&[masked.clone(), masked], 1), vec![0.5]);
    }

    #[test]
    fn wbce_hand_values() {
        // w = e^{0.5}, L = e^{0.5} ln 2
        let l = wbce(&[0.5], &Target::hard(&[1]), &[0.5]).unwrap();
        close(l, 0.5f64.exp() * 2f64.ln(), 1e-15);
        close(l, 1.142_806_5, 1e-7);
        let l = wbce(&[0.5], &Target::hard(&[0]), &[0.0]).unwrap();
        close(l, 2f64.ln(), 1e-15);
    }

    #[test]
    fn wbce_perfect_prediction_vanishes() {
        let l = wbce(&[1.0 - 1e-15], &Target::hard(&[1]), &[0.3]).unwrap();
        assert!(l < 1e-11);
    }

    #[test]
    fn asl_margin_clips_easy_negative() {
        let cfg = LossConfig::new(vec![0.5]);
        assert_eq!(asl(&[0.03], &Target::hard(&[0]), &cfg).unwrap(), 0.0);
        let l = asl(&[0.5], &Target::hard(&[1]), &cfg).unwrap();
        close(l, 0.5 * 2f64.ln(), 1e-15);
    }

    #[test]
    fn combined_hand_value() {
        let cfg = LossConfig::new(vec![0.5]);
        let l = combined(&[0.5], &Target::hard(&[1]), &cfg).unwrap();
        close(l, 0.5f64.exp() * 0.5 * 2f64.ln(), 1e-15);
        close(l, 0.571_403_25, 1e-7);
    }

    #[test]
    fn masked_class_contributes_nothing() {
        let cfg = LossConfig::new(vec![0.2, 0.2]);
        let t = Target {
            y: vec![1.0, 0.0],
            mask: vec![true, false],
        };
        let (l, g) = loss_and_grad(&[0.3, 0.9], &t, &cfg).unwrap();
        let (l1, _) = loss_and_grad(&[0.3], &Target::hard(&[1]), &LossConfig::new(vec![0.2])).unwrap();
        assert_eq!(l, l1);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn nan_rejected() {
        let cfg = LossConfig::new(vec![0.5]);
        assert!(matches!(
            combined(&[f64::NAN], &Target::hard(&[1]), &cfg),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = LossConfig::new(vec![0.5]);
        cfg.margin = 1.0;
        assert!(cfg.validate(1).is_err());
        assert!(LossConfig::new(vec![0.5, 0.5]).validate(1).is_err());
    }

    #[test]
    fn mode_round_trips_through_text() {
        for m in [LossMode::Bce, LossMode::Wbce, LossMode::Asl, LossMode::Combined] {
            assert_eq!(m.to_string().parse::<LossMode>().unwrap(), m);
        }
    }
}
