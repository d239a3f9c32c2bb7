//! Finite-difference checks over every primitive, every loss and the full
//! fusion model.

use rand::Rng;

use crate::error::Result;
use crate::losses::{loss_on_tape, LossConfig, LossMode, Target};
use crate::model::{ForwardMode, Model, ModelConfig, ParamGroup};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, StreamKey, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<SuiteCase>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn lines(&self) -> Vec<String> {
        self.cases
            .iter()
            .map(|c| format!("{:<26} {}", c.name, c.report.summary()))
            .collect()
    }

    pub fn max_rel_err(&self, prefix: &str) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.report.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn uniform(seed: u64, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = StreamKey::new(seed, name, 0).rng();
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Parameters `a` (and `b` when `b_shape` is given) drawn from `[lo, hi)`.
fn store_ab(seed: u64, a_shape: &[usize], b_shape: Option<&[usize]>, lo: f64, hi: f64) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    s.insert("a", uniform(seed, "a", a_shape, lo, hi), true)?;
    if let Some(b) = b_shape {
        s.insert("b", uniform(seed, "b", b, lo, hi), true)?;
    }
    Ok(s)
}

/// Reduce an arbitrary output to a scalar through fixed random weights so
/// every output entry matters.
fn project(tape: &Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let w = tape.constant(uniform(seed, "proj", &shape, -1.0, 1.0));
    tape.sum(tape.mul(out, w)?, None)
}

type Build = Box<dyn Fn(&Tape, Var, Option<Var>, u64) -> Result<Var>>;

struct PrimCase {
    name: &'static str,
    a: Vec<usize>,
    b: Option<Vec<usize>>,
    range: (f64, f64),
    build: Build,
}

fn prim(name: &'static str, a: &[usize], b: Option<&[usize]>, range: (f64, f64), build: Build) -> PrimCase {
    PrimCase {
        name,
        a: a.to_vec(),
        b: b.map(<[usize]>::to_vec),
        range,
        build,
    }
}

fn primitive_cases() -> Vec<PrimCase> {
    let sym = (-1.0, 1.0);
    let pos = (0.5, 2.0);
    let key = StreamKey::new(11, "gradsuite.mask", 0);
    vec![
        prim("add", &[3, 4], Some(&[4]), sym, Box::new(|t, a, b, _| t.add(a, b.unwrap()))),
        prim("sub", &[2, 3, 4], Some(&[3, 1]), sym, Box::new(|t, a, b, _| t.sub(a, b.unwrap()))),
        prim("mul", &[3, 4], Some(&[3, 4]), sym, Box::new(|t, a, b, _| t.mul(a, b.unwrap()))),
        prim("scale", &[5], None, sym, Box::new(|t, a, _, _| t.scale(a, -1.7))),
        prim("add_scalar", &[5], None, sym, Box::new(|t, a, _, _| t.add_scalar(a, 0.3))),
        prim("matmul", &[3, 4], Some(&[4, 2]), sym, Box::new(|t, a, b, _| t.matmul(a, b.unwrap()))),
        prim("matmul_batched", &[2, 3, 4], Some(&[2, 4, 2]), sym, Box::new(|t, a, b, _| t.matmul(a, b.unwrap()))),
        prim("affine", &[3, 4], Some(&[2, 4]), sym, Box::new(|t, a, w, s| {
            let bias = t.constant(uniform(s, "bias", &[2], -1.0, 1.0));
            t.affine(a, w.unwrap(), Some(bias))
        })),
        prim("sigmoid", &[3, 4], None, (-3.0, 3.0), Box::new(|t, a, _, _| t.sigmoid(a))),
        prim("exp", &[3, 4], None, sym, Box::new(|t, a, _, _| t.exp(a))),
        prim("log", &[3, 4], None, pos, Box::new(|t, a, _, _| t.log(a))),
        prim("powf", &[3, 4], None, pos, Box::new(|t, a, _, _| t.powf(a, 1.7))),
        prim("clamp", &[4, 4], None, (-1.0, 1.0), Box::new(|t, a, _, _| t.clamp(a, Some(-0.5), Some(0.5)))),
        prim("softmax", &[3, 5], None, (-2.0, 2.0), Box::new(|t, a, _, _| t.softmax(a))),
        prim("layer_norm", &[3, 6], None, (-2.0, 2.0), Box::new(|t, a, _, _| t.layer_norm(a, 1e-5))),
        prim("gelu", &[3, 4], None, (-3.0, 3.0), Box::new(|t, a, _, _| t.gelu(a))),
        prim("gather", &[4, 3], None, sym, Box::new(|t, a, _, _| t.gather(a, vec![2, 0, 2, 3]))),
        prim("concat", &[2, 3], Some(&[1, 3]), sym, Box::new(|t, a, b, _| t.concat(&[a, b.unwrap(), a], 0))),
        prim("permute", &[2, 3, 4], None, sym, Box::new(|t, a, _, _| t.permute(a, &[2, 0, 1]))),
        prim("reshape", &[2, 6], None, sym, Box::new(|t, a, _, _| t.reshape(a, &[3, 4]))),
        prim("sum_axis", &[3, 4], None, sym, Box::new(|t, a, _, _| t.sum(a, Some(0)))),
        prim("mean_all", &[3, 4], None, sym, Box::new(|t, a, _, _| {
            let m = t.mean(a, None)?;
            t.mul(m, m)
        })),
        prim("mean_axis", &[2, 3, 4], None, sym, Box::new(|t, a, _, _| t.mean(a, Some(1)))),
        prim("dropout", &[4, 5], None, sym, Box::new(move |t, a, _, _| t.dropout(a, 0.3, key))),
        prim("drop_path", &[4, 5], None, sym, Box::new(move |t, a, _, _| t.drop_path(a, 0.3, key.child("dp")))),
        prim("im2col", &[5, 5, 2], None, sym, Box::new(|t, a, _, _| t.im2col(a, 3, 2, 1))),
    ]
}

/// One loss on `classes` logits drawn from `[-range, range)`. The last class
/// is masked out when hard targets are used.
fn loss_case(
    mode: LossMode,
    soft: bool,
    classes: usize,
    range: f64,
) -> (impl Fn(u64) -> Result<ParamStore>, impl Fn(&Tape, &ParamStore, u64) -> Result<Var>) {
    let params = move |seed| {
        let mut s = ParamStore::new();
        s.insert("logits", uniform(seed, "logits", &[classes], -range, range), true)?;
        Ok(s)
    };
    let builder = move |tape: &Tape, store: &ParamStore, seed: u64| {
        let mut rng = StreamKey::new(seed, "loss.targets", 0).rng();
        let target = if soft {
            Target::soft((0..classes).map(|_| rng.random::<f64>()).collect())
        } else {
            let mut t = Target::hard(&(0..classes).map(|_| rng.random_bool(0.4) as u8).collect::<Vec<_>>());
            if classes > 1 {
                t.mask[classes - 1] = false;
            }
            t
        };
        let rho = (0..classes).map(|_| rng.random_range(0.05..0.95)).collect();
        let cfg = LossConfig::new(rho).with_mode(mode);
        let logits = tape.param(store, "logits")?;
        loss_on_tape(tape, logits, &target, &cfg)
    };
    (params, builder)
}

/// Toy configuration for the full-model check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        classes: 3,
        dim: 8,
        feat_h: 2,
        feat_w: 2,
        max_views: 3,
        encoder_layers: 1,
        heads: 2,
        ff_dim: 12,
        decoder_heads: 2,
        image_h: 8,
        image_w: 8,
        image_c: 1,
        stage_widths: vec![4, 6],
        stage_strides: vec![2, 2],
        pos_temperature: 100.0,
        use_segment: true,
    }
}

/// Perturb every parameter so that zero-initialised entries (biases, pad
/// token, norm offsets) also exercise non-trivial gradients.
fn jitter(store: &mut ParamStore, seed: u64) {
    for p in store.iter_mut() {
        let mut rng = StreamKey::new(seed, &p.name, 1).rng();
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

fn toy_store(model: &Model, seed: u64) -> Result<ParamStore> {
    let groups = [ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Fusion];
    let mut s = model.init_params(seed, &groups)?;
    jitter(&mut s, seed);
    Ok(s)
}

/// Key-projection biases add the same constant to every score of a query,
/// which softmax cancels, so their true gradient is identically zero and a
/// relative-error test on them only measures roundoff.
pub fn is_key_bias(name: &str) -> bool {
    name.ends_with(".attn.k.b")
}

fn toy_loss(model: &Model, tape: &Tape, store: &ParamStore, seed: u64) -> Result<Var> {
    let images: Vec<Tensor> = (0..2)
        .map(|v| uniform(seed, &format!("image{v}"), &[8, 8, 1], -1.0, 1.0))
        .collect();
    let logits = model.fusion_logits_images(tape, store, &images, &ForwardMode::eval())?;
    // Soft targets keep every class gradient well above finite-difference
    // roundoff; a hard negative with small p has a gradient near 1e-9.
    let target = Target::soft(vec![0.8, 0.5, 0.7]);
    let cfg = LossConfig::new(vec![0.3, 0.5, 0.2]);
    loss_on_tape(tape, logits, &target, &cfg)
}

/// Largest analytic gradient magnitude on any key bias of the toy model.
pub fn key_bias_grad_max(seeds: &[u64]) -> Result<f64> {
    let model = Model::new(toy_model_config())?;
    let mut worst = 0.0f64;
    for &seed in seeds {
        let store = toy_store(&model, seed)?;
        let tape = Tape::new();
        let root = toy_loss(&model, &tape, &store, seed)?;
        let grads = tape.backward(root)?.for_store(&store);
        for (name, g) in &grads {
            if is_key_bias(name) {
                worst = g.data().iter().fold(worst, |m, v| m.max(v.abs()));
            }
        }
    }
    Ok(worst)
}

/// Full fusion forward (backbone included) plus combined loss on a 2-view
/// study. Key biases are held fixed, see [`is_key_bias`].
pub fn model_check(seeds: &[u64], h: f64, tol: f64) -> Result<GradCheckReport> {
    let model = Model::new(toy_model_config())?;
    grad_check(
        |seed| {
            let mut s = toy_store(&model, seed)?;
            let names: Vec<String> = s.names().filter(|n| is_key_bias(n)).map(String::from).collect();
            for n in names {
                s.set_trainable(&n, false);
            }
            Ok(s)
        },
        |tape, store, seed| toy_loss(&model, tape, store, seed),
        seeds,
        h,
        tol,
    )
}

/// Random single-class draws per loss mode.
pub const LOSS_DRAWS: u64 = 100;

/// Primitive and loss checks at `tol_basic`, the full model at `tol_model`.
pub fn run_suite(seeds: &[u64], h: f64, tol_basic: f64, tol_model: f64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for case in primitive_cases() {
        let PrimCase { name, a, b, range, build } = case;
        let report = grad_check(
            |seed| store_ab(seed, &a, b.as_deref(), range.0, range.1),
            |tape, store, seed| {
                let av = tape.param(store, "a")?;
                let bv = if b.is_some() { Some(tape.param(store, "b")?) } else { None };
                let out = build(tape, av, bv, seed)?;
                project(tape, out, seed)
            },
            seeds,
            h,
            tol_basic,
        )?;
        cases.push(SuiteCase {
            name: format!("primitive/{name}"),
            report,
        });
    }
    for (mode, soft) in [
        (LossMode::Bce, false),
        (LossMode::Wbce, false),
        (LossMode::Asl, false),
        (LossMode::Combined, false),
        (LossMode::Combined, true),
    ] {
        let tag = format!("{mode}{}", if soft { "_soft" } else { "" });
        // Six classes at moderate logits, where summed terms keep every
        // entry's gradient far above roundoff.
        let (params, builder) = loss_case(mode, soft, 6, 1.5);
        let report = grad_check(params, builder, seeds, h, tol_basic)?;
        cases.push(SuiteCase {
            name: format!("loss/{tag}"),
            report,
        });
        // Single-class draws over a wide logit range.
        let draws: Vec<u64> = (0..LOSS_DRAWS).map(|d| 1000 + d).collect();
        let (params, builder) = loss_case(mode, soft, 1, 5.0);
        let report = grad_check(params, builder, &draws, h, tol_basic)?;
        cases.push(SuiteCase {
            name: format!("loss/{tag}_draws"),
            report,
        });
    }
    cases.push(SuiteCase {
        name: "model/fusion_2view".into(),
        report: model_check(seeds, h, tol_model)?,
    });
    let passed = cases.iter().all(|c| c.report.passed);
    Ok(SuiteReport { cases, passed })
}
