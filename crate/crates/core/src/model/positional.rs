use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal position table, `[T_max, D]`.
///
/// Entry `(t, d)` is `sin(t / 10000^(d/D))` for even `d` and `cos(t / 10000^(d/D))`
/// for odd `d`. Each column uses its own exponent `d/D`, so a sine column and the
/// following cosine column have slightly different frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub table: Tensor,
}

pub fn positional_encoding(t_max: usize, d_model: usize) -> Result<PositionalEncoding> {
    if t_max == 0 || d_model == 0 {
        return Err(Error::invalid("positional encoding needs T_max, D >= 1"));
    }
    let table = Tensor::from_fn(&[t_max, d_model], |i| {
        let (t, d) = ((i / d_model) as f64, i % d_model);
        let angle = t / 10000f64.powf(d as f64 / d_model as f64);
        if d % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    });
    Ok(PositionalEncoding { table })
}

impl PositionalEncoding {
    /// First `len` rows.
    pub fn rows(&self, len: usize) -> Result<Tensor> {
        let d = self.table.shape()[1];
        if len == 0 || len > self.table.shape()[0] {
            return Err(Error::invalid(format!("positional table has no {len} rows")));
        }
        Tensor::new(&[len, d], self.table.data()[..len * d].to_vec())
    }

    pub fn row(&self, t: usize) -> Result<Tensor> {
        let d = self.table.shape()[1];
        if t >= self.table.shape()[0] {
            return Err(Error::invalid(format!("positional table has no row {t}")));
        }
        Tensor::new(&[d], self.table.data()[t * d..(t + 1) * d].to_vec())
    }
}
