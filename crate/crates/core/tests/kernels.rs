use posecascade::tensor::kernels::{conv2d_backward, gemm_nt_accumulate, ConvGeom};
use proptest::prelude::*;

fn values(n: usize, salt: usize) -> Vec<f64> {
    (0..n).map(|i| (((i * 7919 + salt * 104729) % 2003) as f64 / 1001.5) - 1.0).collect()
}

/// Loops straight from the definition: every output cell scatters its
/// gradient over the input window it read.
fn naive_conv_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut dx, mut dw, mut db) = (vec![0.0; x.len()], vec![0.0; w.len()], vec![0.0; g.out_channels]);
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for i in 0..g.out_h {
                for j in 0..g.out_w {
                    let gy = dy[((n * g.out_channels + o) * g.out_h + i) * g.out_w + j];
                    db[o] += gy;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let r = (i * g.stride + ki) as isize - g.pad as isize;
                                let q = (j * g.stride + kj) as isize - g.pad as isize;
                                if r < 0 || q < 0 || r >= g.height as isize || q >= g.width as isize {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.height + r as usize) * g.width + q as usize;
                                let wi = ((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj;
                                dw[wi] += gy * x[xi];
                                dx[xi] += gy * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + y.abs()))
}

proptest! {
    #[test]
    fn gemm_nt_matches_triple_loop(m in 1..9usize, n in 1..40usize, k in 1..150usize, salt in 0..100usize) {
        let (a, b) = (values(m * k, salt), values(n * k, salt + 1));
        let start = values(m * n, salt + 2);
        let mut c = start.clone();
        gemm_nt_accumulate(m, n, k, &a, &b, &mut c);
        let mut oracle = start;
        for i in 0..m {
            for j in 0..n {
                oracle[i * n + j] += (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum::<f64>();
            }
        }
        prop_assert!(close(&c, &oracle));

        let (a32, b32): (Vec<f32>, Vec<f32>) = (a.iter().map(|&v| v as f32).collect(), b.iter().map(|&v| v as f32).collect());
        let mut c32 = vec![0.0f32; m * n];
        gemm_nt_accumulate(m, n, k, &a32, &b32, &mut c32);
        for i in 0..m * n {
            let exact: f64 = (0..k).map(|p| a32[(i / n) * k + p] as f64 * b32[(i % n) * k + p] as f64).sum();
            prop_assert!((c32[i] as f64 - exact).abs() <= 1e-4 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn conv_backward_matches_naive_loops(
        batch in 1..3usize,
        cin in 1..4usize,
        cout in 1..4usize,
        k in 1..4usize,
        extra_h in 0..6usize,
        extra_w in 0..6usize,
        stride in 1..3usize,
        pad_frac in 0.0..1.0f64,
    ) {
        let (h, w) = (k + extra_h, k + extra_w);
        let pad = (pad_frac * k as f64) as usize;
        let g = ConvGeom::new(&[batch, cin, h, w], &[cout, cin, k, k], stride, pad).unwrap();
        let x = values(batch * cin * h * w, 1);
        let wt = values(cout * cin * k * k, 2);
        let dy = values(batch * cout * g.out_h * g.out_w, 3);
        let grads = conv2d_backward(&x, &wt, &dy, &g, true);
        let (dx, dw, db) = naive_conv_backward(&x, &wt, &dy, &g);
        prop_assert!(close(grads.dx.as_ref().unwrap(), &dx));
        prop_assert!(close(&grads.dweight, &dw));
        prop_assert!(close(&grads.dbias, &db));
    }
}
