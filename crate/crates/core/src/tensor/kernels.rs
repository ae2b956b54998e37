// Raw-slice kernels. Products of two f32 values are exact in f64, so every
// inner product here is accumulated in f64 and rounded once on store.

/// `a[m×k] · b[k×n]`, row-major.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { matmul_avx512(a, b, m, k, n, &mut out) };
            return out;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { matmul_avx2(a, b, m, k, n, &mut out) };
            return out;
        }
    }
    matmul_body::<8>(a, b, m, k, n, &mut out);
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_avx512(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    matmul_body::<16>(a, b, m, k, n, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_avx2(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    matmul_body::<8>(a, b, m, k, n, out)
}

/// Register-blocked product: each `R×C` output tile is accumulated over the
/// whole inner dimension before being stored. Every output element is the
/// sequential f64 sum over `p`, and f32 products are exact in f64, so the
/// result does not depend on which instruction set runs this.
#[inline(always)]
fn matmul_body<const C: usize>(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    const R: usize = 4;
    let n_main = n - n % C;
    let mut i0 = 0;
    while i0 + R <= m {
        let arows: [&[f32]; R] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
        let mut j0 = 0;
        while j0 < n_main {
            let mut acc = [[0.0f64; C]; R];
            for p in 0..k {
                let brow: &[f32; C] = b[p * n + j0..p * n + j0 + C].try_into().unwrap();
                let bv: [f64; C] = brow.map(|x| x as f64);
                for r in 0..R {
                    let av = arows[r][p] as f64;
                    for c in 0..C {
                        acc[r][c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                for c in 0..C {
                    out[(i0 + r) * n + j0 + c] = row[c] as f32;
                }
            }
            j0 += C;
        }
        i0 += R;
    }
    // Leftover rows and columns.
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        let j_start = if i < i0 { n_main } else { 0 };
        if j_start == n {
            continue;
        }
        acc[j_start..].fill(0.0);
        for p in 0..k {
            let av = a[i * k + p] as f64;
            for (s, &bv) in acc[j_start..].iter_mut().zip(&b[p * n + j_start..(p + 1) * n]) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n + j_start..(i + 1) * n].iter_mut().zip(&acc[j_start..]) {
            *o = *s as f32;
        }
    }
}

/// `aᵀ · c` for `a[m×k]`, `c[m×n]`, giving `[k×n]`.
pub(crate) fn matmul_tn(a: &[f32], c: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul(&transpose(a, m, k), c, k, m, n)
}

/// `g · bᵀ` for `g[m×n]`, `b[k×n]`, giving `[m×k]`.
pub(crate) fn matmul_nt(g: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose(b, k, n);
    matmul(g, &bt, m, n, k)
}

pub(crate) fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax of `x[m×n]`, stabilized by subtracting each row's max.
pub fn softmax_rows(x: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        softmax_into(&x[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
    }
    out
}

pub(crate) fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = (v as f64 - max).exp();
            sum += e;
            e
        })
        .collect();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// `ln Σ exp(row)` in f64.
pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
