//! Clustering agreement: NMI (arithmetic-mean normalization) and ARI.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};

/// Contingency counts of two labelings with their marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub rows: Vec<u64>,
    pub cols: Vec<u64>,
    pub n: u64,
}

/// Dense indices of the distinct labels, in sorted order.
fn index_labels<T: Ord + Copy>(labels: &[T]) -> BTreeMap<T, usize> {
    let mut m: BTreeMap<T, usize> = labels.iter().map(|&l| (l, 0)).collect();
    for (i, v) in m.values_mut().enumerate() {
        *v = i;
    }
    m
}

pub fn contingency<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(invalid!("labelings have lengths {} and {}", a.len(), b.len()));
    }
    let ia = index_labels(a);
    let ib = index_labels(b);
    let mut table = vec![vec![0u64; ib.len()]; ia.len()];
    for (x, y) in a.iter().zip(b) {
        table[ia[x]][ib[y]] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..ib.len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        table,
        rows,
        cols,
        n: a.len() as u64,
    })
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(a; b) / ((H(a) + H(b)) / 2)`. Defined as 0 when either labeling has a
/// single cluster, and 1 when both do.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    let c = contingency(a, b)?;
    if c.n == 0 {
        return Err(invalid!("NMI of empty labelings"));
    }
    let n = c.n as f64;
    let (ha, hb) = (entropy(&c.rows, n), entropy(&c.cols, n));
    if c.rows.len() == 1 && c.cols.len() == 1 {
        return Ok(1.0);
    }
    if c.rows.len() == 1 || c.cols.len() == 1 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.rows[i] as f64 * c.cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. When the expected and maximum index coincide (both
/// labelings trivial in the same way) the labelings are identical up to
/// renaming and the result is 1.
pub fn ari<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    let c = contingency(a, b)?;
    if c.n == 0 {
        return Err(invalid!("ARI of empty labelings"));
    }
    let index: f64 = c.table.iter().flatten().map(|&x| comb2(x)).sum();
    let sa: f64 = c.rows.iter().map(|&x| comb2(x)).sum();
    let sb: f64 = c.cols.iter().map(|&x| comb2(x)).sum();
    let expected = sa * sb / comb2(c.n).max(f64::MIN_POSITIVE);
    let max = (sa + sb) / 2.0;
    let denom = max - expected;
    if denom.abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Foreground-restricted `(NMI, ARI)`: only pixels whose ground-truth label
/// differs from `background` count.
pub fn fg_metrics<P: Ord + Copy>(pred: &[P], gt: &[u8], background: u8) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(invalid!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
    }
    let (p, g): (Vec<P>, Vec<u8>) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g != background)
        .map(|(&p, &g)| (p, g))
        .unzip();
    if g.is_empty() {
        return Err(Error::EmptyForeground);
    }
    Ok((nmi(&p, &g)?, ari(&p, &g)?))
}
