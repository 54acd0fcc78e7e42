use std::io::Write;

use super::BsrMatrix;
use crate::error::Result;

/// Writes `a` in Matrix Market coordinate format, one line per stored scalar
/// (explicit zeros included), with 1-based indices.
pub fn write_matrix_market<W: Write>(a: &BsrMatrix, mut out: W) -> Result<()> {
    let (br, bc) = a.block_shape();
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(
        out,
        "{} {} {}",
        a.nrows(),
        a.ncols(),
        a.nnz_blocks() * br * bc
    )?;
    for (k, (r, c)) in a.pattern().entries().enumerate() {
        let blk = a.block(k);
        for i in 0..br {
            for j in 0..bc {
                writeln!(
                    out,
                    "{} {} {:e}",
                    r * br + i + 1,
                    c * bc + j + 1,
                    blk[i * bc + j]
                )?;
            }
        }
    }
    Ok(())
}
