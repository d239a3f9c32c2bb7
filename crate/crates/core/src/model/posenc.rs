use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2-D sinusoidal grid `[H, W, D]`.
///
/// Channels `[0, D/2)` encode the column `x`, channels `[D/2, D)` the row
/// `y`. Within each half, channel `j` uses frequency
/// `temperature^(-2⌊j/2⌋ / (D/2))`, sine on even `j` and cosine on odd `j`.
pub fn positional_encoding_2d(h: usize, w: usize, d: usize, temperature: f64) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs D divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let freq: Vec<f64> = (0..half)
        .map(|j| temperature.powf(-2.0 * (j / 2) as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for (coord, f) in [(x as f64, &freq), (y as f64, &freq)] {
                for (j, fr) in f.iter().enumerate() {
                    let a = coord * fr;
                    data.push(if j % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    Tensor::new(&[h, w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let pe = positional_encoding_2d(3, 3, 16, 10000.0).unwrap();
        for (j, v) in pe.data()[..16].iter().enumerate() {
            assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn x_half_at_column_one() {
        let pe = positional_encoding_2d(1, 2, 8, 10000.0).unwrap();
        let at = &pe.data()[8..12];
        let f = 10000f64.powf(-0.5);
        let expect = [1f64.sin(), 1f64.cos(), f.sin(), f.cos()];
        for (a, b) in at.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // y half is still at row 0
        assert_eq!(&pe.data()[12..16], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bounded_and_validated() {
        let pe = positional_encoding_2d(16, 16, 64, 10000.0).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding_2d(4, 4, 6, 10000.0).is_err());
    }
}
