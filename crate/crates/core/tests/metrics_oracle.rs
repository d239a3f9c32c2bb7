use chexfusion::metrics::{assign_groups, auroc, average_precision, mean_ap, report, PredictionSet};
use chexfusion::tensor::StreamKey;
use rand::Rng;

/// Rank of `i` (1-based) under descending score, ties by ascending index.
fn rank_of(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

fn brute_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank_of(scores, i);
            let hits = pos.iter().filter(|&&j| rank_of(scores, j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn brute_auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for i in (0..scores.len()).filter(|&i| labels[i] == 1) {
        for j in (0..scores.len()).filter(|&j| labels[j] == 0) {
            pairs += 1;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

fn seeded_set(seed: u64, studies: usize, classes: usize) -> PredictionSet {
    let mut rng = StreamKey::new(seed, "oracle.preds", 0).rng();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..studies {
        let l: Vec<u8> = (0..classes).map(|c| rng.random_bool(0.4 / (c + 1) as f64 + 0.05) as u8).collect();
        // coarse scores so ties occur
        let s: Vec<f64> = l
            .iter()
            .map(|&y| ((y as f64 * 0.6 + rng.random::<f64>()) * 8.0).round() / 8.0)
            .collect();
        scores.push(s);
        labels.push(l);
    }
    PredictionSet::new(
        (0..studies).map(|i| format!("s{i}")).collect(),
        (0..classes).map(|c| format!("c{c}")).collect(),
        scores,
        labels,
    )
    .unwrap()
}

#[test]
fn per_class_metrics_match_brute_force() {
    let preds = seeded_set(1, 200, 12);
    let mut aps = Vec::new();
    for c in 0..12 {
        let (s, l) = preds.class_column(c);
        let (a, b) = (average_precision(&s, &l), brute_ap(&s, &l));
        assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            assert!((a - b).abs() < 1e-10, "class {c}: AP {a} vs {b}");
            aps.push(b);
        }
        if let (Some(a), Some(b)) = (auroc(&s, &l), brute_auroc(&s, &l)) {
            assert!((a - b).abs() < 1e-10, "class {c}: AUROC {a} vs {b}");
        }
    }
    let m = mean_ap(&preds, None).unwrap();
    assert!((m.value - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-10);
}

#[test]
fn group_means_match_brute_force() {
    let preds = seeded_set(2, 200, 12);
    let counts: Vec<usize> = (0..12).map(|c| preds.class_column(c).1.iter().map(|&y| y as usize).sum()).collect();
    let groups = assign_groups(&counts, (4, 4, 4)).unwrap();
    let r = report(&preds, &groups).unwrap();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let group_ap = |members: &[usize]| {
        let v: Vec<f64> = members
            .iter()
            .filter_map(|&c| {
                let (s, l) = preds.class_column(c);
                brute_ap(&s, &l)
            })
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((r.map_head.unwrap() - group_ap(&order[..4])).abs() < 1e-10);
    assert!((r.map_medium.unwrap() - group_ap(&order[4..8])).abs() < 1e-10);
    assert!((r.map_tail.unwrap() - group_ap(&order[8..])).abs() < 1e-10);
}
