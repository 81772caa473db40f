use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep embedding `[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]`
/// with `f_i = MAX_PERIOD^(-i/h)` and `h = dim / 2`.
pub fn sinusoidal_embed(t: usize, dim: usize, t_max: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::usage(format!("embedding width must be even and positive, got {dim}")));
    }
    if t > t_max {
        return Err(Error::usage(format!("timestep {t} exceeds {t_max}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-MAX_PERIOD.ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// Embeddings for every `t` in `0..=t_max`.
pub fn embedding_table(dim: usize, t_max: usize) -> Result<Vec<Vec<f64>>> {
    (0..=t_max).map(|t| sinusoidal_embed(t, dim, t_max)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timestep() {
        let e = sinusoidal_embed(0, 8, 50).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal_embed(1, 3, 50).is_err());
        assert!(sinusoidal_embed(51, 4, 50).is_err());
    }

    #[test]
    fn neighbouring_steps_differ() {
        let a = sinusoidal_embed(1, 8, 50).unwrap();
        let b = sinusoidal_embed(2, 8, 50).unwrap();
        let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max > 0.0);
    }

    #[test]
    fn all_steps_distinct() {
        let table = embedding_table(32, 50).unwrap();
        for i in 0..table.len() {
            for j in 0..i {
                assert_ne!(table[i], table[j], "t={i} and t={j} collide");
            }
        }
    }
}
