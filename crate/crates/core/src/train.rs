//! Affine per-step denoiser and the semi-supervised training loop.
//!
//! For Gaussian data the Bayes-optimal noise predictor at every step is affine
//! in `z`, so `eps_hat = A_t z + b_{t,label}` contains the exact optimum and
//! training can be checked against [`GaussianWorld::analytic_epsilon`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::{corrupt, NoiseSchedule, Patch};
use crate::world::{Denoiser, GaussianWorld, Label};

const BASE_LEARNING_RATE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDenoiser {
    height: usize,
    width: usize,
    steps: usize,
    num_classes: usize,
    /// `scales[t]` is `A_t`, row-major `d x d`; index 0 is unused.
    scales: Vec<Vec<f64>>,
    /// `offsets[t][label.index()]` is `b_{t,label}`.
    offsets: Vec<Vec<Vec<f64>>>,
}

impl LinearDenoiser {
    /// All-zero parameters.
    pub fn zeros(height: usize, width: usize, steps: usize, num_classes: usize) -> Self {
        let d = height * width;
        LinearDenoiser {
            height,
            width,
            steps,
            num_classes,
            scales: vec![vec![0.0; d * d]; steps + 1],
            offsets: vec![vec![vec![0.0; d]; num_classes + 1]; steps + 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scale(&self, t: usize) -> &[f64] {
        &self.scales[t]
    }

    pub fn offset(&self, t: usize, label: Label) -> &[f64] {
        &self.offsets[t][label.index()]
    }

    fn predict_flat(&self, z: &[f64], t: usize, label: Label, out: &mut [f64]) {
        let d = self.dim();
        let a = &self.scales[t];
        let b = &self.offsets[t][label.index()];
        for i in 0..d {
            let row = &a[i * d..(i + 1) * d];
            out[i] = b[i] + row.iter().zip(z).map(|(x, y)| x * y).sum::<f64>();
        }
    }

    /// Parameters as a `(T, d^2 + (N+1) d)` row-major table: row `t-1` holds
    /// `A_t` followed by `b_{t,null}, b_{t,1}, .., b_{t,N}`.
    pub fn to_table(&self) -> (Vec<usize>, Vec<f64>) {
        let d = self.dim();
        let cols = d * d + (self.num_classes + 1) * d;
        let mut data = Vec::with_capacity(self.steps * cols);
        for t in 1..=self.steps {
            data.extend_from_slice(&self.scales[t]);
            for b in &self.offsets[t] {
                data.extend_from_slice(b);
            }
        }
        (vec![self.steps, cols], data)
    }

    /// Inverse of [`LinearDenoiser::to_table`].
    pub fn from_table(height: usize, width: usize, num_classes: usize, dims: &[usize], data: &[f64]) -> Result<Self> {
        let d = height * width;
        let cols = d * d + (num_classes + 1) * d;
        if dims.len() != 2 || dims[1] != cols || dims[0] < 2 || data.len() != dims[0] * cols {
            return Err(Error::shape(&[dims.first().copied().unwrap_or(0), cols], dims));
        }
        let steps = dims[0];
        let mut den = LinearDenoiser::zeros(height, width, steps, num_classes);
        for t in 1..=steps {
            let row = &data[(t - 1) * cols..t * cols];
            den.scales[t].copy_from_slice(&row[..d * d]);
            for (k, b) in den.offsets[t].iter_mut().enumerate() {
                let start = d * d + k * d;
                b.copy_from_slice(&row[start..start + d]);
            }
        }
        Ok(den)
    }
}

impl Denoiser for LinearDenoiser {
    fn epsilon(&self, z: &Patch, t: usize, label: Label) -> Result<Patch> {
        let (ch, h, w) = z.dim();
        if (h, w) != (self.height, self.width) {
            return Err(Error::UnsupportedShape { height: h, width: w });
        }
        if t == 0 || t > self.steps {
            return Err(Error::TimeOutOfRange { t, max: self.steps });
        }
        if label.index() > self.num_classes {
            return Err(Error::InvalidArgument(format!("label {label} not trained")));
        }
        let mut out = Patch::zeros(z.raw_dim());
        let mut flat = vec![0.0; self.dim()];
        let mut res = vec![0.0; self.dim()];
        for c in 0..ch {
            for (k, v) in z.index_axis(ndarray::Axis(0), c).iter().enumerate() {
                flat[k] = *v;
            }
            self.predict_flat(&flat, t, label, &mut res);
            for (o, r) in out.index_axis_mut(ndarray::Axis(0), c).iter_mut().zip(&res) {
                *o = *r;
            }
        }
        Ok(out)
    }

    fn supports(&self, height: usize, width: usize) -> bool {
        (height, width) == (self.height, self.width)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Per-iteration record of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub unconditional_draws: usize,
}

/// Semi-supervised denoising training.
///
/// Each iteration draws `u ~ U[0,1)`; when `u < p_unc` the sample comes from the
/// class mixture with the null label, otherwise a labelled `(x0, c)` pair is
/// used. A uniform `t in 1..=T` is corrupted and one SGD step is taken on
/// `|eps - eps_hat|^2`. The step size of each time step's parameter block decays
/// as `1e-2 / sqrt(n)` in the number of updates `n` that block has received.
pub fn train_toy<R: Rng + ?Sized>(
    world: &GaussianWorld,
    mut denoiser: LinearDenoiser,
    schedule: &NoiseSchedule,
    p_unc: f64,
    iterations: usize,
    rng: &mut R,
) -> Result<(LinearDenoiser, TrainReport)> {
    if !(0.0..=1.0).contains(&p_unc) {
        return Err(Error::InvalidArgument(format!("p_unc must lie in [0, 1], got {p_unc}")));
    }
    if (denoiser.height, denoiser.width) != (world.height, world.width)
        || denoiser.num_classes != world.num_classes()
        || denoiser.steps != schedule.steps()
    {
        return Err(Error::InvalidArgument(
            "denoiser dimensions do not match the world and schedule".into(),
        ));
    }
    let (h, w) = (world.height, world.width);
    let d = h * w;
    let factor = world.cholesky_factor(h, w);
    let mut updates = vec![0usize; schedule.steps() + 1];
    let mut report = TrainReport {
        losses: Vec::with_capacity(iterations),
        unconditional_draws: 0,
    };
    let mut pred = vec![0.0; d];
    let mut residual = vec![0.0; d];

    for iteration in 0..iterations {
        let u: f64 = rng.random();
        let class = Label::Class(rng.random_range(1..=world.num_classes()));
        let label = if u < p_unc {
            report.unconditional_draws += 1;
            Label::Null
        } else {
            class
        };
        let x0 = world.sample_with_factor(&factor, h, w, class, rng)?;
        let t = rng.random_range(1..=schedule.steps());
        let eps = Patch::from_shape_vec((1, h, w), crate::rng::normals(rng, d)).unwrap();
        let z = corrupt(&x0, t, &eps, schedule)?;
        let z = z.as_slice().expect("standard layout");
        let eps = eps.as_slice().expect("standard layout");

        denoiser.predict_flat(z, t, label, &mut pred);
        let mut loss = 0.0;
        for i in 0..d {
            residual[i] = pred[i] - eps[i];
            loss += residual[i] * residual[i];
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        report.losses.push(loss);

        updates[t] += 1;
        let lr = BASE_LEARNING_RATE / (updates[t] as f64).sqrt();
        let a = &mut denoiser.scales[t];
        for i in 0..d {
            let g = 2.0 * lr * residual[i];
            for (aij, zj) in a[i * d..(i + 1) * d].iter_mut().zip(z) {
                *aij -= g * zj;
            }
        }
        for (b, r) in denoiser.offsets[t][label.index()].iter_mut().zip(&residual) {
            *b -= 2.0 * lr * r;
        }
    }
    Ok((denoiser, report))
}
