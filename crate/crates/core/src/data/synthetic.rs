//! Seeded multi-view long-tailed image generator.
//!
//! Every class is a Gaussian blob at a home cell of a 4×4 grid, bright or
//! dark (odd classes are dark). Frontal-only and lateral-only classes are
//! drawn only in views of that type, so a study can be positive for a
//! class its single view cannot show. Cross-view classes are drawn in every
//! view with a polarity (bright or dark): positives use one polarity across
//! all their views, decoy negatives mix polarities, so a single view tells
//! only that the template is present and the label lies in the agreement
//! between views.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use super::{Dataset, LabelValue, Study};
use crate::error::{Error, Result};
use crate::model::{ViewImage, ViewLabel};
use crate::par;
use crate::tensor::{StreamKey, Tensor};

/// Grid of template cells per image side.
pub const CELLS_PER_SIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Frontal,
    Lateral,
    Both,
    /// Drawn in every view; positives agree in polarity across views.
    CrossView,
}

impl Visibility {
    pub fn shows_in(self, view: ViewLabel) -> bool {
        match self {
            Visibility::Frontal => view != ViewLabel::Lateral,
            Visibility::Lateral => view == ViewLabel::Lateral,
            Visibility::Both | Visibility::CrossView => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub studies: usize,
    /// Square image side in pixels; a multiple of the cell grid.
    pub image_size: usize,
    /// Prior of the most frequent class.
    pub prior_max: f64,
    /// Class `k` has prior `prior_max · (k+1)^(−prior_exponent)`.
    pub prior_exponent: f64,
    /// Symmetric latent correlations between classes (diagonal ignored).
    pub cooccurrence: Vec<Vec<f64>>,
    pub visibility: Vec<Visibility>,
    /// `P(N0 = i + 1)`.
    pub view_count_dist: Vec<f64>,
    /// Probability that a single-view study is frontal.
    pub single_frontal_prob: f64,
    pub noise_std: f64,
    /// Per-class template amplitude (difficulty knob).
    pub amplitude: Vec<f64>,
    pub blob_sigma: f64,
    /// Maximum template offset in pixels from its cell centre.
    pub jitter: usize,
    /// Probability that a cross-view negative carries decoys.
    pub decoy_prob: f64,
    /// Strength of the vertical ramp that marks lateral views.
    pub lateral_marker: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::with_classes(12, 2000, 0)
    }
}

impl SyntheticConfig {
    pub fn with_classes(classes: usize, studies: usize, seed: u64) -> Self {
        let mut cooc = vec![vec![0.0; classes]; classes];
        for &(a, b, r) in &[(0usize, 4usize, 0.3), (1, 6, 0.3), (2, 9, 0.25), (5, 10, 0.25)] {
            if a < classes && b < classes {
                cooc[a][b] = r;
                cooc[b][a] = r;
            }
        }
        // cross-view classes sit at the frequent end so stage 2 sees enough
        // positives to learn agreement
        let pattern = [
            Visibility::CrossView,
            Visibility::Both,
            Visibility::Frontal,
            Visibility::Lateral,
        ];
        Self {
            classes,
            studies,
            image_size: 32,
            prior_max: 0.35,
            prior_exponent: 1.0,
            cooccurrence: cooc,
            visibility: (0..classes).map(|k| pattern[k % pattern.len()]).collect(),
            view_count_dist: vec![0.3, 0.4, 0.2, 0.1],
            single_frontal_prob: 0.6,
            noise_std: 0.3,
            amplitude: vec![1.0; classes],
            blob_sigma: 1.5,
            jitter: 1,
            decoy_prob: 0.5,
            lateral_marker: 0.3,
            seed,
        }
    }

    /// Fixed sign of a class's blob; `None` for cross-view classes, whose
    /// sign is drawn per study. Odd classes are dark, so a backbone has to
    /// tell dark blobs from bright ones.
    pub fn polarity(&self, class: usize) -> Option<f64> {
        match self.visibility[class] {
            Visibility::CrossView => None,
            _ if class % 2 == 1 => Some(-1.0),
            _ => Some(1.0),
        }
    }

    pub fn priors(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| self.prior_max * ((k + 1) as f64).powf(-self.prior_exponent))
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|k| format!("finding_{k:02}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        let bad = |m: String| Err(Error::Config(m));
        if c == 0 {
            return bad("synthetic classes must be >= 1".into());
        }
        if self.priors().iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("class priors must lie in (0, 1)".into());
        }
        if self.visibility.len() != c || self.amplitude.len() != c {
            return bad(format!("visibility and amplitude need {c} entries"));
        }
        if self.cooccurrence.len() != c || self.cooccurrence.iter().any(|r| r.len() != c) {
            return bad(format!("cooccurrence must be {c}x{c}"));
        }
        for i in 0..c {
            for j in 0..c {
                if self.cooccurrence[i][j] != self.cooccurrence[j][i] {
                    return bad(format!("cooccurrence not symmetric at ({i}, {j})"));
                }
            }
        }
        let total: f64 = self.view_count_dist.iter().sum();
        if self.view_count_dist.is_empty()
            || self.view_count_dist.iter().any(|p| *p < 0.0)
            || (total - 1.0).abs() > 1e-9
        {
            return bad("view_count_dist must be a probability vector".into());
        }
        if self.image_size == 0 || self.image_size % CELLS_PER_SIDE != 0 {
            return bad(format!("image_size must be a multiple of {CELLS_PER_SIDE}"));
        }
        let fixed = |v: ViewLabel| self.visibility.iter().filter(|x| x.shows_in(v)).count();
        let cells = CELLS_PER_SIDE * CELLS_PER_SIDE;
        if fixed(ViewLabel::Frontal) > cells || fixed(ViewLabel::Lateral) > cells {
            return bad(format!("more classes than the {cells} template cells"));
        }
        for (name, p) in [
            ("single_frontal_prob", self.single_frontal_prob),
            ("decoy_prob", self.decoy_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0 && self.blob_sigma > 0.0) {
            return bad("noise_std must be >= 0 and blob_sigma > 0".into());
        }
        if 2 * self.jitter >= self.image_size / CELLS_PER_SIDE {
            return bad("jitter too large for the cell size".into());
        }
        Ok(())
    }

    fn cell_size(&self) -> usize {
        self.image_size / CELLS_PER_SIDE
    }

    /// Pixel centre of a template cell.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let s = self.cell_size() as f64;
        let (r, c) = (cell / CELLS_PER_SIDE, cell % CELLS_PER_SIDE);
        (r as f64 * s + (s - 1.0) / 2.0, c as f64 * s + (s - 1.0) / 2.0)
    }

    /// Unit-amplitude Gaussian blob centred at pixel `(cy, cx)`, as an
    /// `image_size²` row-major array. Classes differ by where it is drawn.
    pub fn template(&self, cy: f64, cx: f64) -> Vec<f64> {
        let n = self.image_size;
        let s2 = self.blob_sigma * self.blob_sigma;
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                out[y * n + x] = (-0.5 * (dy * dy + dx * dx) / s2).exp();
            }
        }
        out
    }
}

/// One template placement in a rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub class: usize,
    pub cell: usize,
    pub cy: f64,
    pub cx: f64,
    /// +1 bright, −1 dark.
    pub sign: f64,
    pub decoy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyTruth {
    pub positives: Vec<bool>,
    /// Placements per view, in the study's view order.
    pub placements: Vec<Vec<Placement>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub priors: Vec<f64>,
    /// Home cell per class in frontal and lateral views (`None` for
    /// classes not drawn there or drawn at a random cell).
    pub frontal_cell: Vec<Option<usize>>,
    pub lateral_cell: Vec<Option<usize>>,
    pub studies: Vec<StudyTruth>,
}

fn home_cells(cfg: &SyntheticConfig, view: ViewLabel, key: StreamKey) -> Vec<Option<usize>> {
    let mut cells: Vec<usize> = (0..CELLS_PER_SIDE * CELLS_PER_SIDE).collect();
    cells.shuffle(&mut key.rng());
    let mut next = cells.into_iter();
    cfg.visibility
        .iter()
        .map(|v| v.shows_in(view).then(|| next.next().expect("validated")))
        .collect()
}

fn latent_factor(cfg: &SyntheticConfig) -> Result<DMatrix<f64>> {
    let c = cfg.classes;
    let sigma = DMatrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { cfg.cooccurrence[i][j] });
    sigma
        .cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| Error::Config("cooccurrence matrix is not positive definite".into()))
}

/// Generate a dataset and the latent record used to build it.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, SyntheticTruth)> {
    cfg.validate()?;
    let root = StreamKey::new(cfg.seed, "synthetic", 0);
    let priors = cfg.priors();
    let std_normal = StatNormal::new(0.0, 1.0).expect("unit normal");
    let thresholds: Vec<f64> = priors.iter().map(|p| std_normal.inverse_cdf(1.0 - p)).collect();
    let l = latent_factor(cfg)?;
    let frontal_cell = home_cells(cfg, ViewLabel::Frontal, root.child("frontal_cells"));
    let lateral_cell = home_cells(cfg, ViewLabel::Lateral, root.child("lateral_cells"));
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let rendered = par::map_indexed(cfg.studies, |s| {
        let mut rng = root.child("study").child_index(s as u64).rng();
        let eps: Vec<f64> = (0..cfg.classes).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = &l * DMatrix::from_column_slice(cfg.classes, 1, &eps);
        let positives: Vec<bool> = (0..cfg.classes).map(|k| z[k] > thresholds[k]).collect();

        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut n0 = cfg.view_count_dist.len();
        for (i, p) in cfg.view_count_dist.iter().enumerate() {
            acc += p;
            if u < acc {
                n0 = i + 1;
                break;
            }
        }
        let mut kinds = Vec::with_capacity(n0);
        if n0 == 1 {
            kinds.push(if rng.random_bool(cfg.single_frontal_prob) {
                ViewLabel::Frontal
            } else {
                ViewLabel::Lateral
            });
        } else {
            kinds.push(ViewLabel::Frontal);
            kinds.push(ViewLabel::Lateral);
            for _ in 2..n0 {
                kinds.push(if rng.random_bool(0.5) {
                    ViewLabel::Frontal
                } else {
                    ViewLabel::Lateral
                });
            }
        }
        kinds.shuffle(&mut rng);

        // per-view polarity of every cross-view class; None when not drawn
        let mut polarity: Vec<Option<Vec<f64>>> = vec![None; cfg.classes];
        for k in 0..cfg.classes {
            if cfg.visibility[k] != Visibility::CrossView {
                continue;
            }
            let sign = |b: bool| if b { 1.0 } else { -1.0 };
            if positives[k] {
                polarity[k] = Some(vec![sign(rng.random_bool(0.5)); n0]);
            } else if rng.random_bool(cfg.decoy_prob) {
                let mut signs: Vec<f64> = (0..n0).map(|_| sign(rng.random_bool(0.5))).collect();
                if n0 > 1 && signs.iter().all(|s| *s == signs[0]) {
                    let flip = rng.random_range(0..n0);
                    signs[flip] = -signs[flip];
                }
                polarity[k] = Some(signs);
            }
        }

        let n = cfg.image_size;
        let j = cfg.jitter as i64;
        let mut views = Vec::with_capacity(n0);
        let mut placements = Vec::with_capacity(n0);
        for (vi, &kind) in kinds.iter().enumerate() {
            let mut px: Vec<f64> = (0..n * n).map(|_| noise.sample(&mut rng)).collect();
            if kind == ViewLabel::Lateral {
                for y in 0..n {
                    let ramp = cfg.lateral_marker * y as f64 / (n - 1) as f64;
                    px[y * n..(y + 1) * n].iter_mut().for_each(|v| *v += ramp);
                }
            }
            let mut placed = Vec::new();
            for k in 0..cfg.classes {
                let home = match kind {
                    ViewLabel::Lateral => lateral_cell[k],
                    _ => frontal_cell[k],
                };
                let (cell, sign) = match (&polarity[k], cfg.visibility[k]) {
                    (Some(signs), _) => (home, signs[vi]),
                    (None, Visibility::CrossView) => (None, 1.0),
                    (None, v) if positives[k] && v.shows_in(kind) => (home, cfg.polarity(k).unwrap_or(1.0)),
                    _ => (None, 1.0),
                };
                let Some(cell) = cell else { continue };
                let (cy, cx) = cfg.cell_center(cell);
                let cy = cy + rng.random_range(-j..=j) as f64;
                let cx = cx + rng.random_range(-j..=j) as f64;
                let t = cfg.template(cy, cx);
                for (p, tv) in px.iter_mut().zip(&t) {
                    *p += sign * cfg.amplitude[k] * tv;
                }
                placed.push(Placement {
                    class: k,
                    cell,
                    cy,
                    cx,
                    sign,
                    decoy: !positives[k],
                });
            }
            views.push(ViewImage::new(
                Tensor::new(&[n, n, 1], px).expect("sized above"),
                kind,
            ));
            placements.push(placed);
        }
        let labels = positives
            .iter()
            .map(|&p| if p { LabelValue::Positive } else { LabelValue::Negative })
            .collect();
        (
            Study {
                study_id: format!("s{:05}", s),
                views,
                labels,
                source: "synthetic".into(),
            },
            StudyTruth {
                positives,
                placements,
            },
        )
    });
    let (studies, truths): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    Ok((
        Dataset::new(cfg.class_names(), studies)?,
        SyntheticTruth {
            priors,
            frontal_cell,
            lateral_cell,
            studies: truths,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let cfg = SyntheticConfig::with_classes(12, 20, 4);
        let (a, ta) = generate_synthetic(&cfg).unwrap();
        let (b, tb) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for s in &a.studies {
            assert!((1..=4).contains(&s.views.len()));
            assert_eq!(s.views[0].pixels.shape(), &[32, 32, 1]);
        }
    }

    #[test]
    fn cross_view_polarity_agreement() {
        let cfg = SyntheticConfig::with_classes(12, 300, 1);
        let (_, truth) = generate_synthetic(&cfg).unwrap();
        let mut decoys = 0;
        for st in &truth.studies {
            for k in (0..12).filter(|k| cfg.visibility[*k] == Visibility::CrossView) {
                let signs: Vec<f64> = st
                    .placements
                    .iter()
                    .filter_map(|v| v.iter().find(|p| p.class == k).map(|p| p.sign))
                    .collect();
                let agree = signs.windows(2).all(|w| w[0] == w[1]);
                if st.positives[k] {
                    assert_eq!(signs.len(), st.placements.len());
                    assert!(agree);
                } else if !signs.is_empty() {
                    decoys += 1;
                    assert_eq!(signs.len() == 1, agree);
                }
            }
        }
        assert!(decoys > 50);
    }

    #[test]
    fn rejects_indefinite_cooccurrence() {
        let mut cfg = SyntheticConfig::with_classes(3, 5, 0);
        cfg.cooccurrence = vec![vec![0.0, 0.99, 0.99], vec![0.99, 0.0, -0.99], vec![0.99, -0.99, 0.0]];
        assert!(generate_synthetic(&cfg).is_err());
    }
}
