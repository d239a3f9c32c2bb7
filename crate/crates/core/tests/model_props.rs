use chexfusion::losses::{loss_on_tape, LossConfig, Target};
use chexfusion::model::{FeatureMapSet, ForwardMode, Model, ModelConfig, ParamGroup, ViewImage, ViewLabel};
use chexfusion::tensor::{ParamStore, StreamKey, Tape, Tensor};
use chexfusion::training::init_stage2;
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        decoder_heads: 2,
        ff_dim: 24,
        stage_widths: vec![8, 12, 16],
        ..ModelConfig::default()
    }
}

fn random_map(cfg: &ModelConfig, key: &str) -> Tensor {
    let mut rng = StreamKey::new(9, key, 0).rng();
    Tensor::from_fn(&[cfg.feat_h, cfg.feat_w, cfg.dim], |_| rng.random_range(-1.0..1.0))
}

fn random_image(cfg: &ModelConfig, key: &str) -> Tensor {
    let mut rng = StreamKey::new(9, key, 0).rng();
    Tensor::from_fn(&[cfg.image_h, cfg.image_w, cfg.image_c], |_| rng.random_range(-1.0..1.0))
}

fn fusion_store(model: &Model, seed: u64) -> ParamStore {
    model
        .init_params(seed, &[ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Fusion])
        .unwrap()
}

fn logits(model: &Model, store: &ParamStore, maps: &[Tensor], mode: &ForwardMode) -> Vec<f64> {
    let tape = Tape::no_grad();
    let set = FeatureMapSet::new(maps.to_vec()).unwrap();
    let v = model.fusion_logits(&tape, store, &set, mode).unwrap();
    tape.value(v).data().to_vec()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn view_order_is_irrelevant_without_segments() {
    let cfg = ModelConfig {
        use_segment: false,
        ..small_config()
    };
    let model = Model::new(cfg.clone()).unwrap();
    let store = fusion_store(&model, 1);
    let maps: Vec<Tensor> = (0..4).map(|i| random_map(&cfg, &format!("m{i}"))).collect();
    let base = logits(&model, &store, &maps, &ForwardMode::eval());
    let perms = permutations(4);
    assert_eq!(perms.len(), 24);
    for p in perms {
        let shuffled: Vec<Tensor> = p.iter().map(|&i| maps[i].clone()).collect();
        let out = logits(&model, &store, &shuffled, &ForwardMode::eval());
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn segment_embeddings_make_order_matter() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let store = fusion_store(&model, 1);
    let maps: Vec<Tensor> = (0..3).map(|i| random_map(&cfg, &format!("m{i}"))).collect();
    let a = logits(&model, &store, &maps, &ForwardMode::eval());
    let b = logits(&model, &store, &[maps[2].clone(), maps[0].clone(), maps[1].clone()], &ForwardMode::eval());
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn shuffling_is_seeded_and_training_only() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let store = fusion_store(&model, 2);
    let maps: Vec<Tensor> = (0..3).map(|i| random_map(&cfg, &format!("m{i}"))).collect();
    let eval = logits(&model, &store, &maps, &ForwardMode::eval());
    assert_eq!(eval, logits(&model, &store, &maps, &ForwardMode::eval().with_shuffle(true)));
    let outs: Vec<Vec<f64>> = (0..8)
        .map(|i| logits(&model, &store, &maps, &ForwardMode::train(StreamKey::new(0, "t", i))))
        .collect();
    assert!(outs.iter().any(|o| o != &eval), "no key moved a view");
    assert_eq!(
        outs[3],
        logits(&model, &store, &maps, &ForwardMode::train(StreamKey::new(0, "t", 3)))
    );
}

fn pad_gradient(model: &Model, store: &ParamStore, maps: &[Tensor]) -> Tensor {
    let tape = Tape::new();
    let set = FeatureMapSet::new(maps.to_vec()).unwrap();
    let out = model.fusion_logits(&tape, store, &set, &ForwardMode::eval()).unwrap();
    let c = model.config().classes;
    let t = Target::hard(&(0..c).map(|i| (i % 3 == 0) as u8).collect::<Vec<_>>());
    let loss = loss_on_tape(&tape, out, &t, &LossConfig::new(vec![0.3; c])).unwrap();
    tape.backward(loss).unwrap().for_store(store)["fusion.pad"].clone()
}

#[test]
fn pad_token_learns_only_from_padded_studies() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let store = fusion_store(&model, 3);
    let maps: Vec<Tensor> = (0..4).map(|i| random_map(&cfg, &format!("m{i}"))).collect();
    let padded = pad_gradient(&model, &store, &maps[..2]);
    assert!(padded.data().iter().any(|g| g.abs() > 1e-8));
    let full = pad_gradient(&model, &store, &maps);
    assert!(full.data().iter().all(|g| *g == 0.0));
}

#[test]
fn tta_equals_two_explicit_passes() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let store = fusion_store(&model, 4);
    let views: Vec<ViewImage> = (0..3)
        .map(|i| ViewImage::new(random_image(&cfg, &format!("v{i}")), ViewLabel::Frontal))
        .collect();
    let got = model.tta_predict(&store, &views).unwrap();
    let pass = |flip: bool| -> Vec<f64> {
        let maps: Vec<Tensor> = views
            .iter()
            .map(|v| {
                let px = if flip { v.pixels.flip_horizontal().unwrap() } else { v.pixels.clone() };
                model.features(&store, &px).unwrap()
            })
            .collect();
        model.predict_fusion(&store, &FeatureMapSet::new(maps).unwrap()).unwrap()
    };
    let (a, b) = (pass(false), pass(true));
    for i in 0..got.len() {
        assert!((got[i] - (a[i] + b[i]) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn stage2_gradients_skip_the_backbone() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let stage1 = model.init_params(5, &[ParamGroup::Backbone, ParamGroup::Head]).unwrap();
    let store = init_stage2(&model, &stage1, 0).unwrap();
    let images: Vec<Tensor> = (0..2).map(|i| random_image(&cfg, &format!("v{i}"))).collect();
    let tape = Tape::new();
    let out = model.fusion_logits_images(&tape, &store, &images, &ForwardMode::eval()).unwrap();
    let c = cfg.classes;
    let loss = loss_on_tape(&tape, out, &Target::hard(&vec![1; c]), &LossConfig::new(vec![0.3; c])).unwrap();
    let grads = tape.backward(loss).unwrap().for_store(&store);
    assert!(grads.keys().all(|k| !k.starts_with("backbone.")));
    assert!(grads["fusion.layer0.attn.q.w"].data().iter().any(|g| *g != 0.0));
    for name in store.names().filter(|n| n.starts_with("backbone.")) {
        assert_eq!(store.value(name).unwrap(), stage1.value(name).unwrap());
    }
}

#[test]
fn fusion_rejects_too_many_or_no_views() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let store = fusion_store(&model, 6);
    let tape = Tape::no_grad();
    let vars: Vec<_> = (0..5).map(|i| tape.constant(random_map(&cfg, &format!("m{i}")))).collect();
    assert!(model.fusion_logits_vars(&tape, &store, &vars, &ForwardMode::eval()).is_err());
    assert!(model.fusion_logits_vars(&tape, &store, &[], &ForwardMode::eval()).is_err());
}
