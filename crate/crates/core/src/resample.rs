//! Separable grid resampling: area-weighted averaging when shrinking an
//! axis, linear interpolation between cell centers when growing it.

/// Dense `to × from` resampling matrix for one axis, row-major.
pub fn axis_operator(from: usize, to: usize) -> Vec<f64> {
    let mut m = vec![0.0; to * from];
    if from == to {
        for i in 0..to {
            m[i * from + i] = 1.0;
        }
    } else if to < from {
        // Target cell i covers [i * s, (i + 1) * s) in source units.
        let s = from as f64 / to as f64;
        for i in 0..to {
            let (a, b) = (i as f64 * s, (i + 1) as f64 * s);
            let mut j = a.floor() as usize;
            while j < from && (j as f64) < b {
                let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                m[i * from + j] = overlap / s;
                j += 1;
            }
        }
    } else {
        let s = from as f64 / to as f64;
        for i in 0..to {
            // Center of target cell in source cell-center coordinates.
            let t = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (from - 1) as f64);
            let j = (t.floor() as usize).min(from - 1);
            let frac = t - j as f64;
            if j + 1 < from && frac > 0.0 {
                m[i * from + j] = 1.0 - frac;
                m[i * from + j + 1] = frac;
            } else {
                m[i * from + j] = 1.0;
            }
        }
    }
    m
}

/// Resamples a `[d, h, w]` volume (x fastest) to new extents.
pub fn resample(values: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    assert_eq!(values.len(), from.iter().product::<usize>());
    let mut cur = values.to_vec();
    let mut shape = from;
    for axis in (0..3).rev() {
        if shape[axis] == to[axis] {
            continue;
        }
        let op = axis_operator(shape[axis], to[axis]);
        cur = apply_axis(&cur, shape, axis, to[axis], &op, false);
        shape[axis] = to[axis];
    }
    cur
}

/// Adjoint of [`resample`]: maps a gradient on the `to` grid back to `from`.
pub fn resample_adjoint(grad: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    assert_eq!(grad.len(), to.iter().product::<usize>());
    // Forward order applies axes 2, 1, 0; the adjoint undoes them in reverse.
    let mut cur = grad.to_vec();
    let mut shape = to;
    for axis in 0..3 {
        if from[axis] == to[axis] {
            continue;
        }
        let op = axis_operator(from[axis], to[axis]);
        cur = apply_axis(&cur, shape, axis, from[axis], &op, true);
        shape[axis] = from[axis];
    }
    cur
}

fn apply_axis(
    values: &[f64],
    shape: [usize; 3],
    axis: usize,
    new_len: usize,
    op: &[f64],
    transpose: bool,
) -> Vec<f64> {
    let old_len = shape[axis];
    let mut out_shape = shape;
    out_shape[axis] = new_len;
    let stride_of = |s: [usize; 3], a: usize| -> usize { s[a + 1..].iter().product() };
    let in_stride = stride_of(shape, axis);
    let out_stride = stride_of(out_shape, axis);
    let outer: usize = shape[..axis].iter().product();
    let inner = in_stride;
    let mut out = vec![0.0; out_shape.iter().product()];
    // op is (to x from); with `transpose` we map to-space back to from-space,
    // so its row length is `new_len` instead of `old_len`.
    let (rows, cols) = (new_len, old_len);
    for o in 0..outer {
        for r in 0..rows {
            for c in 0..cols {
                let w = if transpose { op[c * rows + r] } else { op[r * cols + c] };
                if w == 0.0 {
                    continue;
                }
                let src = o * old_len * in_stride + c * in_stride;
                let dst = o * new_len * out_stride + r * out_stride;
                for i in 0..inner {
                    out[dst + i] += w * values[src + i];
                }
            }
        }
    }
    out
}
