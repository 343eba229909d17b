use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window `[floor(i·n/out), ceil((i+1)·n/out))` of output cell `i`.
fn window(i: usize, n: usize, out: usize) -> (usize, usize) {
    ((i * n) / out, ((i + 1) * n).div_ceil(out))
}

fn check(shape: &[usize], target: (usize, usize)) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::shape(format!("pooling expects C×H×W, got {shape:?}")));
    }
    if target.0 == 0 || target.1 == 0 || shape[1] < target.0 || shape[2] < target.1 {
        return Err(Error::shape(format!(
            "adaptive pool target {target:?} exceeds input {}x{}",
            shape[1], shape[2]
        )));
    }
    Ok(())
}

pub fn adaptive_avg_pool(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    check(x.shape(), target)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (th, tw) = target;
    let xd = x.data();
    Ok(Tensor::from_fn(&[c, th, tw], |i| {
        let (r0, r1) = window(i[1], h, th);
        let (c0, c1) = window(i[2], w, tw);
        let mut s = 0.0;
        for r in r0..r1 {
            s += xd[(i[0] * h + r) * w + c0..(i[0] * h + r) * w + c1].iter().sum::<f64>();
        }
        s / ((r1 - r0) * (c1 - c0)) as f64
    }))
}

/// Spreads each output-cell gradient uniformly over its window.
pub fn adaptive_avg_pool_backward(grad_out: &Tensor, input_hw: (usize, usize)) -> Result<Tensor> {
    let (c, th, tw) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let (h, w) = input_hw;
    check(&[c, h, w], (th, tw))?;
    let mut dx = Tensor::zeros(&[c, h, w]);
    let d = dx.data_mut();
    for ch in 0..c {
        for i in 0..th {
            let (r0, r1) = window(i, h, th);
            for j in 0..tw {
                let (c0, c1) = window(j, w, tw);
                let g = grad_out.get(&[ch, i, j]) / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for col in c0..c1 {
                        d[(ch * h + r) * w + col] += g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_constant_and_global_mean() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64);
        assert_eq!(adaptive_avg_pool(&x, (3, 4)).unwrap(), x);
        let c = Tensor::filled(&[1, 7, 5], 2.5);
        assert!(adaptive_avg_pool(&c, (3, 2)).unwrap().data().iter().all(|v| *v == 2.5));
        let g = adaptive_avg_pool(&x, (1, 1)).unwrap();
        assert_eq!(g.data(), &[5.5, 17.5]);
    }

    #[test]
    fn overlapping_windows_follow_floor_ceil() {
        // 5 rows into 2 cells: windows [0,3) and [2,5).
        assert_eq!(window(0, 5, 2), (0, 3));
        assert_eq!(window(1, 5, 2), (2, 5));
        let x = Tensor::new(vec![1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(adaptive_avg_pool(&x, (2, 1)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::from_fn(&[2, 7, 5], |i| ((i[0] + 2 * i[1] + 3 * i[2]) % 5) as f64 - 2.0);
        let y = adaptive_avg_pool(&x, (3, 2)).unwrap();
        let dy = Tensor::from_fn(y.shape(), |i| (i[0] + i[1] * 2 + i[2]) as f64 * 0.5 - 1.0);
        let dx = adaptive_avg_pool_backward(&dy, (7, 5)).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn target_larger_than_input_is_rejected() {
        assert!(adaptive_avg_pool(&Tensor::zeros(&[1, 2, 2]), (3, 1)).is_err());
    }
}
