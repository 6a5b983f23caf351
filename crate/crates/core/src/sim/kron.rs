use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Eliminated blocks with a 1-norm condition estimate above this are
/// treated as singular.
const MAX_CONDITION: f64 = 1e12;

fn norm1(m: &DMatrix<Complex64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Eliminates every node not listed in `keep`, returning
/// `Y_kk - Y_kd * Y_dd^{-1} * Y_dk` ordered as `keep`.
pub fn kron_reduce(y_full: &DMatrix<Complex64>, keep: &[usize]) -> Result<DMatrix<Complex64>> {
    let n = y_full.nrows();
    if y_full.ncols() != n {
        return Err(Error::shape("kron_reduce", format!("{}x{} is not square", n, y_full.ncols())));
    }
    let mut kept = vec![false; n];
    for &k in keep {
        if k >= n || kept[k] {
            return Err(Error::InvalidArgument(format!("bad keep index {k}")));
        }
        kept[k] = true;
    }
    let drop: Vec<usize> = (0..n).filter(|&i| !kept[i]).collect();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| y_full[(rows[i], cols[j])])
    };
    let ykk = pick(keep, keep);
    if drop.is_empty() {
        return Ok(ykk);
    }
    let ykd = pick(keep, &drop);
    let ydk = pick(&drop, keep);
    let ydd = pick(&drop, &drop);

    let lu = ydd.clone().lu();
    let inv = lu.try_inverse();
    let condition = match &inv {
        Some(inv) => norm1(&ydd) * norm1(inv),
        None => f64::INFINITY,
    };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Reduction { condition });
    }
    let x = ydd.lu().solve(&ydk).ok_or(Error::Reduction { condition })?;
    Ok(ykk - ykd * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn nothing_eliminated_is_identity() {
        let y = DMatrix::from_row_slice(2, 2, &[c(1.0, -5.0), c(-0.5, 4.0), c(-0.5, 4.0), c(2.0, -6.0)]);
        assert_eq!(kron_reduce(&y, &[0, 1]).unwrap(), y);
    }

    #[test]
    fn zero_coupling_keeps_block() {
        let mut y = DMatrix::zeros(4, 4);
        y[(0, 0)] = c(1.0, -3.0);
        y[(0, 1)] = c(-1.0, 2.0);
        y[(1, 0)] = c(-1.0, 2.0);
        y[(1, 1)] = c(2.0, -4.0);
        y[(2, 2)] = c(3.0, -1.0);
        y[(3, 3)] = c(1.0, -1.0);
        let r = kron_reduce(&y, &[0, 1]).unwrap();
        assert_eq!(r, y.view((0, 0), (2, 2)).into_owned());
    }

    #[test]
    fn singular_block_reports_condition() {
        let mut y = DMatrix::zeros(3, 3);
        y[(0, 0)] = c(1.0, -1.0);
        match kron_reduce(&y, &[0]) {
            Err(Error::Reduction { condition }) => assert!(condition.is_infinite() || condition > 1e12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reduced_network_reproduces_kept_voltages() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            // Random connected 4-bus network with shunt to ground at every bus.
            let n = 4;
            let mut y = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let yl = c(rng.random_range(0.1..1.0), -rng.random_range(1.0..10.0));
                    y[(i, j)] -= yl;
                    y[(j, i)] -= yl;
                    y[(i, i)] += yl;
                    y[(j, j)] += yl;
                }
                y[(i, i)] += c(rng.random_range(0.01..0.2), rng.random_range(-0.5..0.5));
            }
            let keep = [0usize, 2];
            let yr = kron_reduce(&y, &keep).unwrap();
            let inj: Vec<Complex64> = keep.iter().map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            // Full-network oracle: currents only at kept nodes.
            let mut i_full = nalgebra::DVector::<Complex64>::zeros(n);
            for (k, &node) in keep.iter().enumerate() {
                i_full[node] = inj[k];
            }
            let v_full = y.clone().lu().solve(&i_full).unwrap();
            let v_kept = nalgebra::DVector::from_iterator(2, keep.iter().map(|&k| v_full[k]));
            let i_red = &yr * &v_kept;
            for k in 0..2 {
                assert!((i_red[k] - inj[k]).norm() < 1e-10);
            }
        }
    }
}
