use ndarray::Array2;

/// Fixed 2D sin-cos table, one row per grid cell in row-major order.
/// The first half of each row encodes the column, the second half the row.
///
/// # Panics
/// If `dim` is not a multiple of 4.
pub fn sincos_2d(dim: usize, rows: usize, cols: usize) -> Array2<f64> {
    assert_eq!(dim % 4, 0, "sin-cos embedding width must be a multiple of 4");
    let half = dim / 2;
    let quarter = half / 2;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Array2::zeros((rows * cols, dim));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = table.row_mut(r * cols + c);
            for (offset, pos) in [(0, c as f64), (half, r as f64)] {
                for (i, w) in omega.iter().enumerate() {
                    row[offset + i] = (pos * w).sin();
                    row[offset + quarter + i] = (pos * w).cos();
                }
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_zeros_then_ones() {
        let t = sincos_2d(8, 2, 3);
        assert_eq!(t.dim(), (6, 8));
        assert_eq!(t.row(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn rows_are_distinct() {
        let t = sincos_2d(16, 4, 4);
        for a in 0..16 {
            for b in a + 1..16 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }
}
