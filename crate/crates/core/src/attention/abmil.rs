use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::Parameters;
use super::divided::{gaussian, softmax_in_place};
use crate::error::{Error, Result};

/// Attention pooling `a = softmax(w . tanh(V f_k))` followed by a linear
/// classifier on `sum_k a_k f_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilModel {
    /// `hidden x feature_dim`.
    pub v: Array2<f64>,
    pub w: Array1<f64>,
    /// `classes x feature_dim`.
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
}

impl AbmilModel {
    pub fn zeros(feature_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            v: Array2::zeros((hidden, feature_dim)),
            w: Array1::zeros(hidden),
            wc: Array2::zeros((classes, feature_dim)),
            bc: Array1::zeros(classes),
        }
    }

    pub fn random(feature_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            v: gaussian(&mut rng, hidden, feature_dim),
            w: gaussian(&mut rng, 1, hidden).row(0).to_owned(),
            wc: gaussian(&mut rng, classes, feature_dim),
            bc: Array1::zeros(classes),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn classes(&self) -> usize {
        self.bc.len()
    }
}


fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().into_owned();
    }
    a.as_slice_mut().unwrap()
}

impl Parameters for AbmilModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("attention.v", self.v.shape(), self.v.as_standard_layout().as_slice().unwrap());
        f("attention.w", self.w.shape(), self.w.as_slice().unwrap());
        f("classifier.weight", self.wc.shape(), self.wc.as_standard_layout().as_slice().unwrap());
        f("classifier.bias", self.bc.shape(), self.bc.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let s = self.v.shape().to_vec();
        f("attention.v", &s, slice_mut(&mut self.v));
        let s = self.w.shape().to_vec();
        f("attention.w", &s, self.w.as_slice_mut().unwrap());
        let s = self.wc.shape().to_vec();
        f("classifier.weight", &s, slice_mut(&mut self.wc));
        let s = self.bc.shape().to_vec();
        f("classifier.bias", &s, self.bc.as_slice_mut().unwrap());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbmilOutput {
    pub logits: Array1<f64>,
    pub attention: Array1<f64>,
    pub pooled: Array1<f64>,
    /// `tanh(V f_k)` per instance.
    pub hidden: Array2<f64>,
}

pub fn abmil_forward(bag: &Array2<f64>, model: &AbmilModel) -> Result<AbmilOutput> {
    if bag.nrows() == 0 {
        return Err(Error::EmptyBag);
    }
    if bag.ncols() != model.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "bag features have dim {}, model expects {}",
            bag.ncols(),
            model.feature_dim()
        )));
    }
    let hidden = bag.dot(&model.v.t()).mapv(f64::tanh);
    let mut a = hidden.dot(&model.w).to_vec();
    softmax_in_place(&mut a);
    let attention = Array1::from(a);
    let pooled = bag.t().dot(&attention);
    let logits = model.wc.dot(&pooled) + &model.bc;
    Ok(AbmilOutput {
        logits,
        attention,
        pooled,
        hidden,
    })
}

fn log_softmax(x: &Array1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + x.mapv(|v| (v - m).exp()).sum().ln();
    x.mapv(|v| v - lse)
}

/// Cross-entropy of the bag's logits against `label`.
pub fn abmil_loss(bag: &Array2<f64>, label: usize, model: &AbmilModel) -> Result<f64> {
    let out = abmil_forward(bag, model)?;
    check_label(label, model)?;
    Ok(-log_softmax(&out.logits)[label])
}

fn check_label(label: usize, model: &AbmilModel) -> Result<()> {
    if label >= model.classes() {
        return Err(Error::InvalidArgument(format!("label {label} with {} classes", model.classes())));
    }
    Ok(())
}

/// Loss and analytic gradients for every model tensor, laid out like the
/// model itself.
pub fn abmil_backward(bag: &Array2<f64>, label: usize, model: &AbmilModel) -> Result<(f64, AbmilModel)> {
    check_label(label, model)?;
    let out = abmil_forward(bag, model)?;
    let logp = log_softmax(&out.logits);
    let loss = -logp[label];
    let mut dlogits = logp.mapv(f64::exp);
    dlogits[label] -= 1.0;

    let mut g = AbmilModel::zeros(model.feature_dim(), model.w.len(), model.classes());
    g.bc.assign(&dlogits);
    g.wc = dlogits.view().insert_axis(Axis(1)).dot(&out.pooled.view().insert_axis(Axis(0)));
    let dpooled = model.wc.t().dot(&dlogits);

    let proj = bag.dot(&dpooled);
    let mean = out.pooled.dot(&dpooled);
    let ds = &out.attention * &(proj - mean);
    g.w = out.hidden.t().dot(&ds);
    // dL/d(V f_k) = ds_k * w * (1 - h_k^2)
    let mut dpre = out.hidden.mapv(|h| 1.0 - h * h);
    for (k, mut row) in dpre.rows_mut().into_iter().enumerate() {
        row *= &(&model.w * ds[k]);
    }
    g.v = dpre.t().dot(bag).as_standard_layout().into_owned();
    Ok((loss, g))
}

pub fn predict(bag: &Array2<f64>, model: &AbmilModel) -> Result<usize> {
    let out = abmil_forward(bag, model)?;
    Ok(out
        .logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 5e-3,
            batch: 16,
            seed: 7,
        }
    }
}

/// Adam on mini-batches of bags drawn with replacement. Returns the mean
/// batch loss of every step.
pub fn train_abmil(model: &mut AbmilModel, bags: &[Array2<f64>], labels: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("training bags"));
    }
    if bags.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} bags, {} labels", bags.len(), labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.flat();
    let mut adam = Adam::new(cfg.lr, params.len());
    let mut history = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch.max(1);
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for _ in 0..batch {
            let k = rng.random_range(0..bags.len());
            let (l, g) = abmil_backward(&bags[k], labels[k], model)?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(g.flat()) {
                *a += b / batch as f64;
            }
        }
        adam.step(&mut params, &grad);
        model.set_flat(&params)?;
        history.push(loss / batch as f64);
    }
    Ok(history)
}

/// Bags of standard-normal instances; positive bags hide one to three
/// signal instances shifted by `shift` along a fixed random unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMilSet {
    pub bags: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    /// Per bag, which instances carry the signal.
    pub signal: Vec<Vec<bool>>,
    pub direction: Array1<f64>,
}

pub fn toy_mil_dataset(bags: usize, bag_size: usize, dim: usize, shift: f64, seed: u64) -> ToyMilSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
    let norm = dir.dot(&dir).sqrt();
    dir /= norm;
    let mut set = ToyMilSet {
        bags: Vec::with_capacity(bags),
        labels: Vec::with_capacity(bags),
        signal: Vec::with_capacity(bags),
        direction: dir.clone(),
    };
    for _ in 0..bags {
        let mut bag = Array2::from_shape_fn((bag_size, dim), |_| StandardNormal.sample(&mut rng));
        let positive = rng.random_bool(0.5);
        let mut flags = vec![false; bag_size];
        if positive && bag_size > 0 {
            let count = rng.random_range(1..=3.min(bag_size));
            while flags.iter().filter(|&&b| b).count() < count {
                flags[rng.random_range(0..bag_size)] = true;
            }
            for (k, _) in flags.iter().enumerate().filter(|(_, &b)| b) {
                bag.row_mut(k).scaled_add(shift, &dir);
            }
        }
        set.bags.push(bag);
        set.labels.push(positive as usize);
        set.signal.push(flags);
    }
    set
}
