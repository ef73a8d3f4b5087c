#![allow(dead_code)]

use rollcar::data::{Dataset, Record};

/// `(client, group, order, time, y)` rows with module index `(order-1)/4+1`.
pub fn dataset(rows: &[(&str, &str, u32, f64, Option<f64>)]) -> Dataset {
    let records = rows
        .iter()
        .map(|&(c, g, order, t, y)| Record {
            client_id: c.into(),
            session_id: format!("{g}-{order}"),
            group_id: g.into(),
            session_order: order,
            module_index: Some((order - 1) / 4 + 1),
            time_weeks: t,
            y,
            covariates: vec![],
        })
        .collect();
    Dataset::from_records(records, vec![]).unwrap()
}

/// Kolmogorov-Smirnov distance between draws and an unnormalized log
/// density evaluated on a uniform grid over `[lo, hi]`.
pub fn ks_against_grid(draws: &[f64], log_density: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 20_001;
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|k| lo + h * k as f64).collect();
    let lp: Vec<f64> = xs.iter().map(|&x| log_density(x)).collect();
    let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = lp.iter().map(|v| (v - max).exp()).collect();
    let mut cdf = vec![0.0; n];
    for k in 1..n {
        cdf[k] = cdf[k - 1] + 0.5 * h * (dens[k] + dens[k - 1]);
    }
    let total = cdf[n - 1];
    cdf.iter_mut().for_each(|c| *c /= total);
    let grid_cdf = |x: f64| -> f64 {
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let pos = (x - lo) / h;
        let k = pos.floor() as usize;
        let f = pos - k as f64;
        cdf[k] * (1.0 - f) + cdf[(k + 1).min(n - 1)] * f
    };
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = grid_cdf(x);
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Inverse of a small dense matrix by Gauss-Jordan elimination.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                m[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}
