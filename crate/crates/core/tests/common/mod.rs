//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use xseg_core::scribbles::{SeedLabel, Seeds};
use xseg_core::Volume3;

/// Dense `L_U` and foreground right-hand side, straight from the definition.
pub fn dense_blocks(v: &Volume3, s: &Seeds, beta: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let g = *v.geometry();
    let raw: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: Vec<f64> = raw
        .iter()
        .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 })
        .collect();
    let unknowns: Vec<usize> = (0..g.len())
        .filter(|&i| s.data()[i] == SeedLabel::Unmarked)
        .collect();
    let pos = |i: usize| unknowns.iter().position(|&u| u == i);
    let n = unknowns.len();
    let mut lu = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (k, &i) in unknowns.iter().enumerate() {
        let c = g.coords(i);
        for axis in 0..3 {
            for step in [-1i64, 1] {
                let m = c[axis] as i64 + step;
                if m < 0 || m >= g.dims[axis] as i64 {
                    continue;
                }
                let mut nc = c;
                nc[axis] = m as usize;
                let j = g.index(nc[0], nc[1], nc[2]);
                let w = (-beta * (z[j] - z[i]).powi(2)).exp().max(1e-300);
                lu[k][k] += w;
                match s.data()[j] {
                    SeedLabel::Unmarked => lu[k][pos(j).unwrap()] -= w,
                    SeedLabel::Foreground => rhs[k] += w,
                    SeedLabel::Background => {}
                }
            }
        }
    }
    (lu, rhs)
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Full-grid foreground probabilities by dense solve.
pub fn dense_random_walker(v: &Volume3, s: &Seeds, beta: f64) -> Vec<f64> {
    let (lu, rhs) = dense_blocks(v, s, beta);
    let x = dense_solve(lu, rhs);
    let mut k = 0;
    s.data()
        .iter()
        .map(|&l| match l {
            SeedLabel::Foreground => 1.0,
            SeedLabel::Background => 0.0,
            SeedLabel::Unmarked => {
                k += 1;
                x[k - 1]
            }
        })
        .collect()
}

/// `depth` passes of the full `n^3` mean kernel, borders mirrored about the
/// half-voxel, summed directly rather than separably.
pub fn box_oracle(field: &[f64], dims: [usize; 3], n: usize, depth: usize) -> Vec<f64> {
    let h = (n / 2) as i64;
    let fold = |k: i64, len: usize| -> usize {
        let len = len as i64;
        let mut k = k;
        while k < 0 || k >= len {
            k = if k < 0 { -k - 1 } else { 2 * len - 1 - k };
        }
        k as usize
    };
    let mut cur = field.to_vec();
    for _ in 0..depth {
        let mut next = vec![0.0; cur.len()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut acc = 0.0;
                    for dz in -h..=h {
                        for dy in -h..=h {
                            for dx in -h..=h {
                                let xx = fold(x as i64 + dx, dims[0]);
                                let yy = fold(y as i64 + dy, dims[1]);
                                let zz = fold(z as i64 + dz, dims[2]);
                                acc += cur[xx + dims[0] * (yy + dims[1] * zz)];
                            }
                        }
                    }
                    next[x + dims[0] * (y + dims[1] * z)] = acc / (n * n * n) as f64;
                }
            }
        }
        cur = next;
    }
    cur
}
