//! One-dimensional maximization: a coarse scan to bracket the global
//! maximum, then golden-section refinement. Ties prefer the smaller
//! argument throughout.

/// Result of a 1-D maximization.
#[derive(Debug, Clone, Copy)]
pub struct Maximum {
    pub arg: f64,
    pub value: f64,
}

const GOLDEN_RATIO: f64 = 0.618_033_988_749_894_9;
const MAX_ITER: usize = 200;

/// Maximizes `f` on `[lo, hi]`: scans `n_scan` equally spaced points
/// (including both endpoints), then refines inside the bracket around the
/// best scan point by golden section until the objective is resolved to
/// `rel_tol` (relative). On ties the smaller argument wins.
pub fn maximize_1d<F: FnMut(f64) -> f64>(
    lo: f64,
    hi: f64,
    n_scan: usize,
    rel_tol: f64,
    f: F,
) -> Maximum {
    maximize_1d_with_extras(lo, hi, n_scan, &[], rel_tol, f)
}

/// Like [`maximize_1d`], but the scan additionally visits `extras` (points
/// outside `[lo, hi]` are ignored). Use it when the objective is only
/// piecewise smooth: passing the kink locations guarantees the scan sees
/// every smooth piece, so a narrow peak pressed against a kink cannot hide
/// between two regular scan points.
pub fn maximize_1d_with_extras<F: FnMut(f64) -> f64>(
    lo: f64,
    hi: f64,
    n_scan: usize,
    extras: &[f64],
    rel_tol: f64,
    mut f: F,
) -> Maximum {
    if !(hi > lo) {
        let value = f(lo);
        return Maximum { arg: lo, value };
    }
    let n = n_scan.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let mut pts: Vec<f64> = (0..n)
        .map(|k| if k == n - 1 { hi } else { lo + step * k as f64 })
        .collect();
    for &e in extras {
        if e.is_finite() && e > lo && e < hi {
            pts.push(e);
        }
    }
    pts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    pts.dedup();
    let mut best = Maximum {
        arg: pts[0],
        value: f(pts[0]),
    };
    let mut best_idx = 0usize;
    for (k, &x) in pts.iter().enumerate().skip(1) {
        let v = f(x);
        if v > best.value {
            best = Maximum { arg: x, value: v };
            best_idx = k;
        }
    }
    let a = if best_idx == 0 { pts[0] } else { pts[best_idx - 1] };
    let b = if best_idx + 1 >= pts.len() {
        pts[pts.len() - 1]
    } else {
        pts[best_idx + 1]
    };
    let refined = golden_section(a, b, rel_tol, &mut f);
    pick_smaller_on_tie(best, refined, rel_tol)
}

/// Golden-section maximization on `[a, b]`; assumes the bracket contains a
/// maximum. Ties move the bracket left.
pub fn golden_section<F: FnMut(f64) -> f64>(
    mut a: f64,
    mut b: f64,
    rel_tol: f64,
    f: &mut F,
) -> Maximum {
    let mut c = b - GOLDEN_RATIO * (b - a);
    let mut d = a + GOLDEN_RATIO * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let arg_scale = a.abs().max(b.abs()).max(1.0);
    for _ in 0..MAX_ITER {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN_RATIO * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN_RATIO * (b - a);
            fd = f(d);
        }
        let obj_scale = fc.abs().max(fd.abs()).max(1e-300);
        if (fc - fd).abs() <= rel_tol * obj_scale && (b - a) <= 1e-6 * arg_scale {
            break;
        }
        if (b - a) <= 1e-13 * arg_scale {
            break;
        }
    }
    if fc >= fd {
        Maximum { arg: c, value: fc }
    } else {
        Maximum { arg: d, value: fd }
    }
}

fn pick_smaller_on_tie(a: Maximum, b: Maximum, rel_tol: f64) -> Maximum {
    let scale = a.value.abs().max(b.value.abs()).max(1e-300);
    let diff = a.value - b.value;
    if diff.abs() <= rel_tol * scale {
        // Objectives indistinguishable at tolerance: smaller argument wins,
        // carrying the larger of the two values.
        let value = a.value.max(b.value);
        if a.arg <= b.arg {
            Maximum { arg: a.arg, value }
        } else {
            Maximum { arg: b.arg, value }
        }
    } else if diff > 0.0 {
        a
    } else {
        b
    }
}
