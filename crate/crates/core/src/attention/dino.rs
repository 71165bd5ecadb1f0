use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::checkpoint::Parameters;
use crate::error::{Error, Result};

/// `teacher <- momentum * teacher + (1 - momentum) * student`.
pub fn ema_update<T: Parameters>(teacher: &mut T, student: &T, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
    }
    let s = student.flat();
    if s.len() != teacher.num_parameters() {
        return Err(Error::ShapeMismatch(format!(
            "teacher has {} parameters, student {}",
            teacher.num_parameters(),
            s.len()
        )));
    }
    let mut off = 0;
    teacher.visit_mut(&mut |_, _, v| {
        for (t, x) in v.iter_mut().zip(&s[off..]) {
            *t = momentum * *t + (1.0 - momentum) * x;
        }
        off += v.len();
    });
    Ok(())
}

fn softmax(x: ArrayView1<f64>, temp: f64) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| ((v - m) / temp).exp());
    let z = e.sum();
    e / z
}

fn log_softmax(x: ArrayView1<f64>, temp: f64) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = x.mapv(|v| ((v - m) / temp).exp()).sum().ln();
    x.mapv(|v| (v - m) / temp - lse)
}

/// Cross-entropy of student views against centred, sharpened teacher
/// targets, averaged over every (global view `g`, student view `v`) pair
/// with `v != g`. A single view is compared with itself.
///
/// `teacher` holds the global views; `student` holds the same global views
/// first, then the local ones.
pub fn dino_loss(teacher: &Array2<f64>, student: &Array2<f64>, center: &Array1<f64>, teacher_temp: f64, student_temp: f64) -> Result<f64> {
    if !(teacher_temp > 0.0 && student_temp > 0.0) {
        return Err(Error::InvalidArgument("temperatures must be positive".into()));
    }
    let k = center.len();
    if teacher.ncols() != k || student.ncols() != k {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?}, student {:?}, center {k}",
            teacher.dim(),
            student.dim()
        )));
    }
    if teacher.nrows() == 0 || student.nrows() == 0 {
        return Err(Error::EmptyInput("views"));
    }
    let targets: Vec<Array1<f64>> = teacher.rows().into_iter().map(|t| softmax((&t - center).view(), teacher_temp)).collect();
    let logs: Vec<Array1<f64>> = student.rows().into_iter().map(|s| log_softmax(s, student_temp)).collect();
    let single = teacher.nrows() == 1 && student.nrows() == 1;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (g, p) in targets.iter().enumerate() {
        for (v, ls) in logs.iter().enumerate() {
            if v == g && !single {
                continue;
            }
            total -= p.dot(ls);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::EmptyInput("view pairs"));
    }
    Ok(total / pairs as f64)
}

/// `center <- m * center + (1 - m) * mean(teacher rows)`.
pub fn update_center(center: &mut Array1<f64>, teacher: &Array2<f64>, momentum: f64) -> Result<()> {
    if teacher.ncols() != center.len() || teacher.nrows() == 0 {
        return Err(Error::ShapeMismatch("teacher outputs do not match the center".into()));
    }
    let mean = teacher.mean_axis(Axis(0)).expect("non-empty");
    *center = &*center * momentum + mean * (1.0 - momentum);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::abmil::AbmilModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &AbmilModel, b: &AbmilModel) -> f64 {
        a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn ema_limits() {
        let s = AbmilModel::random(4, 3, 2, 1);
        let t0 = AbmilModel::random(4, 3, 2, 2);
        let mut t = t0.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        assert!(ema_update(&mut t, &s, 1.5).is_err());
        assert!(ema_update(&mut t, &AbmilModel::random(5, 3, 2, 1), 0.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let s = AbmilModel::random(4, 3, 2, 3);
        let mut t = AbmilModel::random(4, 3, 2, 4);
        let d0 = dist(&t, &s);
        for n in 1..=20 {
            ema_update(&mut t, &s, 0.9).unwrap();
            let want = 0.9f64.powi(n) * d0;
            assert!((dist(&t, &s) - want).abs() < 1e-9 * d0.max(1.0));
        }
    }

    #[test]
    fn identical_views_give_entropy() {
        let logits = Array2::from_shape_vec((2, 4), vec![0.2, 1.0, -0.5, 0.3, 0.2, 1.0, -0.5, 0.3]).unwrap();
        let loss = dino_loss(&logits, &logits, &Array1::zeros(4), 0.5, 0.5).unwrap();
        let p = softmax(logits.row(0), 0.5);
        let h = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((loss - h).abs() < 1e-12);
        let one = logits.slice(ndarray::s![0..1, ..]).to_owned();
        assert!((dino_loss(&one, &one, &Array1::zeros(4), 0.5, 0.5).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn sharp_teacher_picks_argmax() {
        let t = Array2::from_shape_vec((1, 3), vec![0.1, 2.0, 0.3]).unwrap();
        let s = Array2::from_shape_vec((2, 3), vec![9.0, 9.0, 9.0, 0.5, -0.2, 1.1]).unwrap();
        let loss = dino_loss(&t, &s, &Array1::zeros(3), 1e-4, 1.0).unwrap();
        let want = -log_softmax(s.row(1), 1.0)[1];
        assert!((loss - want).abs() < 1e-10);
    }

    #[test]
    fn loss_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (g, v, k) = (2, 5, 6);
            let t = Array2::from_shape_fn((g, k), |_| rng.random_range(-3.0..3.0));
            let s = Array2::from_shape_fn((v, k), |_| rng.random_range(-3.0..3.0));
            let c = Array1::from_shape_fn(k, |_| rng.random_range(-0.5..0.5));
            let (tt, ts) = (0.04f64, 0.1f64);
            let mut total = 0.0;
            let mut n = 0.0;
            for gi in 0..g {
                let mut p = vec![0.0; k];
                let mut z = 0.0f64;
                for j in 0..k {
                    p[j] = ((t[[gi, j]] - c[j]) / tt).exp();
                    z += p[j];
                }
                for vi in 0..v {
                    if vi == gi {
                        continue;
                    }
                    let mut zs = 0.0f64;
                    for j in 0..k {
                        zs += (s[[vi, j]] / ts).exp();
                    }
                    for j in 0..k {
                        total -= p[j] / z * (s[[vi, j]] / ts - zs.ln());
                    }
                    n += 1.0;
                }
            }
            let got = dino_loss(&t, &s, &c, tt, ts).unwrap();
            assert!((got - total / n).abs() < 1e-10 * (1.0 + got.abs()));
        }
    }

    #[test]
    fn center_moves_toward_teacher_mean() {
        let mut c = Array1::zeros(2);
        let t = Array2::from_shape_vec((2, 2), vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        update_center(&mut c, &t, 0.5).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0]);
    }
}
