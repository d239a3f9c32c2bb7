//! Image noise used for student training.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{StreamKey, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    Flip,
    /// Additive Gaussian noise with σ drawn from [0, 0.1].
    Noise,
    /// Zero a random rectangle covering at most a quarter of the image.
    Erase,
    /// Add a constant drawn from [−0.2, 0.2].
    Brightness,
}

pub const AUGMENT_OPS: [AugmentOp; 4] = [
    AugmentOp::Flip,
    AugmentOp::Noise,
    AugmentOp::Erase,
    AugmentOp::Brightness,
];

/// Apply one op to an `[H, W, C]` image.
pub fn apply_op(image: &Tensor, op: AugmentOp, rng: &mut impl Rng) -> Result<Tensor> {
    match op {
        AugmentOp::Flip => image.flip_horizontal(),
        AugmentOp::Noise => {
            let sigma = rng.random_range(0.0..=0.1);
            let n = Normal::new(0.0, sigma).expect("sigma >= 0");
            let mut out = image.clone();
            out.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
            Ok(out)
        }
        AugmentOp::Erase => {
            let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
            let area = rng.random_range(0.0..=0.25) * (h * w) as f64;
            let aspect: f64 = rng.random_range(0.5..=2.0);
            let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
            // keep the erased area within a quarter of the image
            let (eh, ew) = if eh * ew * 4 > h * w { (eh, (h * w / (4 * eh)).max(1)) } else { (eh, ew) };
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            let mut out = image.clone();
            let d = out.data_mut();
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    d[(y * w + x) * c..(y * w + x + 1) * c].fill(0.0);
                }
            }
            Ok(out)
        }
        AugmentOp::Brightness => {
            let b = rng.random_range(-0.2..=0.2);
            Ok(image.map(|v| v + b))
        }
    }
}

/// Two distinct ops chosen at random and applied in sequence.
pub fn augment_heavy(image: &Tensor, key: StreamKey) -> Result<Tensor> {
    let mut rng = key.rng();
    let picks = index::sample(&mut rng, AUGMENT_OPS.len(), 2);
    let mut out = image.clone();
    for i in picks.iter() {
        out = apply_op(&out, AUGMENT_OPS[i], &mut rng)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erase_stays_within_a_quarter() {
        let img = Tensor::full(&[32, 32, 1], 1.0);
        for s in 0..200 {
            let out = apply_op(&img, AugmentOp::Erase, &mut StreamKey::new(s, "e", 0).rng()).unwrap();
            let zeros = out.data().iter().filter(|v| **v == 0.0).count();
            assert!(zeros >= 1 && zeros * 4 <= 32 * 32, "{zeros}");
        }
    }

    #[test]
    fn heavy_is_deterministic() {
        let img = Tensor::from_fn(&[8, 8, 1], |i| i as f64);
        let k = StreamKey::new(1, "aug", 3);
        assert_eq!(augment_heavy(&img, k).unwrap(), augment_heavy(&img, k).unwrap());
    }
}
