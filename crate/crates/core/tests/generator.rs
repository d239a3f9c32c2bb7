use chexfusion::data::{generate_synthetic, Dataset, SyntheticConfig, SyntheticTruth, Visibility};
use chexfusion::metrics::auroc;
use chexfusion::model::ViewLabel;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn frequencies_follow_power_law() {
    let cfg = SyntheticConfig::with_classes(12, 10_000, 3);
    let (ds, truth) = generate_synthetic(&cfg).unwrap();
    let mut counts = ds.positive_counts();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let mut priors = truth.priors.clone();
    priors.sort_by(|a, b| b.total_cmp(a));
    for (c, p) in counts.iter().zip(&priors) {
        let freq = *c as f64 / 10_000.0;
        assert!((freq - p).abs() / p < 0.2, "frequency {freq} vs prior {p}");
    }
}

#[test]
fn flat_priors_pass_chi_square() {
    let mut cfg = SyntheticConfig::with_classes(12, 10_000, 5);
    cfg.prior_exponent = 0.0;
    let (ds, _) = generate_synthetic(&cfg).unwrap();
    let counts = ds.positive_counts();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
    let crit = ChiSquared::new(11.0).unwrap().inverse_cdf(0.999);
    assert!(stat < crit, "chi2 {stat} >= {crit}");
}

/// Best correlation of a view with a class blob near its home cell, over
/// the jitter window.
fn blob_score(cfg: &SyntheticConfig, pixels: &[f64], cell: usize, sign: f64) -> f64 {
    let (cy, cx) = cfg.cell_center(cell);
    let j = cfg.jitter as i64;
    let mut best = f64::MIN;
    for dy in -j..=j {
        for dx in -j..=j {
            let t = cfg.template(cy + dy as f64, cx + dx as f64);
            let s: f64 = sign * t.iter().zip(pixels).map(|(a, b)| a * b).sum::<f64>();
            best = best.max(s);
        }
    }
    best
}

/// Ideal template detector for `class`, using only views of the given kinds.
/// It reads the views that can show the class; a reader with none of those
/// probes its views at the class's lateral home cell, the best a
/// frontal-only reader can do.
fn ideal_scores(
    cfg: &SyntheticConfig,
    ds: &Dataset,
    truth: &SyntheticTruth,
    class: usize,
    use_kind: impl Fn(ViewLabel) -> bool,
) -> (Vec<f64>, Vec<u8>) {
    let sign = cfg.polarity(class).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, st) in ds.studies.iter().enumerate() {
        let kinds: Vec<ViewLabel> = st.views.iter().map(|v| v.view).collect();
        if !(kinds.contains(&ViewLabel::Frontal) && kinds.contains(&ViewLabel::Lateral)) {
            continue;
        }
        let used: Vec<_> = st.views.iter().filter(|v| use_kind(v.view)).collect();
        let visible: Vec<_> = used.iter().filter(|v| cfg.visibility[class].shows_in(v.view)).collect();
        let best = if visible.is_empty() {
            let cell = truth.lateral_cell[class].unwrap();
            used.iter().map(|v| blob_score(cfg, v.pixels.data(), cell, sign)).fold(f64::MIN, f64::max)
        } else {
            visible
                .iter()
                .map(|v| {
                    let cell = match v.view {
                        ViewLabel::Lateral => truth.lateral_cell[class],
                        _ => truth.frontal_cell[class],
                    };
                    blob_score(cfg, v.pixels.data(), cell.unwrap(), sign)
                })
                .fold(f64::MIN, f64::max)
        };
        scores.push(best);
        labels.push(truth.studies[s].positives[class] as u8);
    }
    (scores, labels)
}

#[test]
fn lateral_only_class_needs_the_lateral_view() {
    let cfg = SyntheticConfig::default();
    let (ds, truth) = generate_synthetic(&cfg).unwrap();
    let lateral: Vec<usize> = (0..cfg.classes)
        .filter(|&k| cfg.visibility[k] == Visibility::Lateral)
        .collect();
    assert!(!lateral.is_empty());
    for k in lateral {
        let (s, l) = ideal_scores(&cfg, &ds, &truth, k, |v| v == ViewLabel::Frontal);
        let frontal_only = auroc(&s, &l).unwrap();
        let (s, l) = ideal_scores(&cfg, &ds, &truth, k, |_| true);
        let all_views = auroc(&s, &l).unwrap();
        assert!(frontal_only < 0.6, "class {k}: frontal-only AUROC {frontal_only}");
        assert!(all_views > 0.9, "class {k}: all-view AUROC {all_views}");
    }
}

#[test]
fn cross_view_class_is_invisible_to_single_views() {
    // Polarity-blind presence is all a single view offers; within studies
    // that carry the template, the sign of one view says nothing.
    let cfg = SyntheticConfig::default();
    let (ds, truth) = generate_synthetic(&cfg).unwrap();
    for k in (0..cfg.classes).filter(|&k| cfg.visibility[k] == Visibility::CrossView) {
        let mut scores = Vec::new();
        let mut agree_scores = Vec::new();
        let mut labels = Vec::new();
        for (s, st) in ds.studies.iter().enumerate() {
            if st.views.len() < 2 {
                continue;
            }
            let signs: Vec<f64> = st
                .views
                .iter()
                .map(|v| {
                    let cell = match v.view {
                        ViewLabel::Lateral => truth.lateral_cell[k],
                        _ => truth.frontal_cell[k],
                    }
                    .unwrap();
                    let (cy, cx) = cfg.cell_center(cell);
                    let t = cfg.template(cy, cx);
                    t.iter().zip(v.pixels.data()).map(|(a, b)| a * b).sum()
                })
                .collect();
            if truth.studies[s].placements[0].iter().all(|p| p.class != k) {
                continue;
            }
            scores.push(signs[0]);
            let min = signs.iter().cloned().fold(f64::MAX, f64::min);
            let max = signs.iter().cloned().fold(f64::MIN, f64::max);
            agree_scores.push(if min > 0.0 { min } else if max < 0.0 { -max } else { -min.abs().min(max.abs()) });
            labels.push(truth.studies[s].positives[k] as u8);
        }
        let single = auroc(&scores, &labels).unwrap();
        let joint = auroc(&agree_scores, &labels).unwrap();
        assert!((single - 0.5).abs() < 0.1, "class {k}: single-view sign AUROC {single}");
        assert!(joint > 0.9, "class {k}: agreement AUROC {joint}");
    }
}
