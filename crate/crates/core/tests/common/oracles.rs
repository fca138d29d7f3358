//! Brute-force reference implementations for the statistics code.

pub fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (oracle_ranks(x), oracle_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn oracle_kendall(x: &[f64], y: &[f64]) -> f64 {
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                c += 1;
            } else {
                d += 1;
            }
        }
    }
    (c - d) as f64 / (((c + d + tx) * (c + d + ty)) as f64).sqrt()
}

pub fn oracle_fill(accs: &[Option<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, a) in accs.iter().enumerate() {
        out.push(match a {
            Some(v) => *v,
            None if i == 0 => 0.0,
            None => out[i - 1],
        });
    }
    out
}

pub fn oracle_best(accs: &[Option<f64>]) -> Vec<f64> {
    (0..accs.len())
        .map(|i| accs[..=i].iter().flatten().fold(0.0, |m: f64, v| if *v > m { *v } else { m }))
        .collect()
}

pub fn oracle_smooth(v: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = usize::min(v.len() - 1, i + half);
            let slice = &v[lo..=hi];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Every ordering of `items`.
pub fn permutations(items: Vec<f64>) -> Vec<Vec<f64>> {
    if items.len() <= 1 {
        return vec![items];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.clone();
        let head = rest.remove(i);
        for mut tail in permutations(rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}
