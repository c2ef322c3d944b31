use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Mismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("buffer of length {len} cannot be shaped {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
}
