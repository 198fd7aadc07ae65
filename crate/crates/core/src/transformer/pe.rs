use super::ModelError;

/// Sinusoidal positional encoding for 0-based position `pos`:
/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(..)`.
pub fn positional_encoding(pos: usize, d_model: usize) -> Result<Vec<f64>, ModelError> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "d_model must be even and positive, got {d_model}"
        )));
    }
    let mut row = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
    Ok(row)
}

/// Precomputed `max_positions x d_model` table. Row `p` is the encoding of
/// 0-based position `p`; the 1-based source position `j` uses row `j - 1`.
#[derive(Clone, Debug)]
pub struct PeTable {
    d_model: usize,
    rows: usize,
    data: Vec<f64>,
}

impl PeTable {
    pub fn new(max_positions: usize, d_model: usize) -> Result<Self, ModelError> {
        let mut data = Vec::with_capacity(max_positions * d_model);
        for pos in 0..max_positions {
            data.extend(positional_encoding(pos, d_model)?);
        }
        Ok(Self {
            d_model,
            rows: max_positions,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn row(&self, pos: usize) -> Result<&[f64], ModelError> {
        if pos >= self.rows {
            return Err(ModelError::PositionOutOfRange { pos, max: self.rows });
        }
        Ok(&self.data[pos * self.d_model..(pos + 1) * self.d_model])
    }

    /// Rows `start..start + len` flattened.
    pub fn rows_flat(&self, start: usize, len: usize) -> Result<&[f64], ModelError> {
        if start + len > self.rows {
            return Err(ModelError::PositionOutOfRange {
                pos: start + len - 1,
                max: self.rows,
            });
        }
        Ok(&self.data[start * self.d_model..(start + len) * self.d_model])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates() {
        assert_eq!(positional_encoding(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_one_matches_closed_form() {
        let row = positional_encoding(1, 4).unwrap();
        let expected = [0.841471, 0.540302, 0.00999983, 0.99995];
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn far_position_uses_sqrt_of_base() {
        let row = positional_encoding(10000, 4).unwrap();
        assert!((row[2] - 100f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(positional_encoding(0, 3).is_err());
    }

    #[test]
    fn table_range_checked() {
        let t = PeTable::new(8, 4).unwrap();
        assert!(t.row(7).is_ok());
        assert!(matches!(
            t.row(8),
            Err(ModelError::PositionOutOfRange { pos: 8, max: 8 })
        ));
    }
}
