//! Central-difference verification of analytic gradients (double precision).

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::config::{Mode, ModelConfig};
use crate::model::Model;
use crate::params::{Grads, ParamStore};
use crate::vocab::{EOS, SOS};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// derivative is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn new_graph(store: &ParamStore<f64>, dropout_seed: Option<u64>) -> Graph<'_, f64> {
    match dropout_seed {
        Some(seed) => Graph::train(store, Rng::new(seed)),
        None => Graph::eval(store),
    }
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "finite-difference check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Largest relative error between the analytic gradient of `f` at `x` and the
/// central difference `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let store = ParamStore::<f64>::new();
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::eval(&store);
        let xv = g.input(x.clone());
        let y = f(&mut g, xv)?;
        scalar_of(&g, y)
    };

    let mut g = Graph::eval(&store);
    let xv = g.input_with_grad(x.clone());
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    Ok(())
}

/// Per-group outcome of [`check_parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Module path of a parameter: its name without the final `.leaf` component.
pub fn parameter_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(group, _)| group)
}

/// Finite-difference check of `loss` with respect to every scalar in `store`,
/// reported per parameter group. `dropout_seed` fixes the dropout masks when
/// the loss is evaluated in training mode.
pub fn check_parameters<F>(
    store: &ParamStore<f64>,
    loss: F,
    eps: f64,
    dropout_seed: Option<u64>,
) -> Result<Vec<GroupError>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    check_parameters_with(store, loss, eps, dropout_seed, |_| {})
}

/// [`check_parameters`] with a hook that may alter the analytic gradient
/// before comparison; used to confirm that the check catches faults.
pub fn check_parameters_with<F>(
    store: &ParamStore<f64>,
    loss: F,
    eps: f64,
    dropout_seed: Option<u64>,
    tamper: impl FnOnce(&mut Grads<f64>),
) -> Result<Vec<GroupError>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = new_graph(store, dropout_seed);
    let y = loss(&mut g)?;
    scalar_of(&g, y)?;
    let mut analytic = g.backward(y)?.into_grads(store);
    drop(g);
    tamper(&mut analytic);

    let mut probe = store.clone();
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let ids: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.len())).collect();
    for (id, name, len) in ids {
        let entry = groups
            .entry(parameter_group(&name).to_string())
            .or_insert((0.0, 0));
        for i in 0..len {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = {
                let mut g = new_graph(&probe, dropout_seed);
                let y = loss(&mut g)?;
                scalar_of(&g, y)?
            };
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = {
                let mut g = new_graph(&probe, dropout_seed);
                let y = loss(&mut g)?;
                scalar_of(&g, y)?
            };
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.get(id)[i], numeric);
            entry.0 = entry.0.max(err);
            entry.1 += 1;
        }
    }
    Ok(groups
        .into_iter()
        .map(|(group, (max_rel_error, coordinates))| GroupError {
            group,
            max_rel_error,
            coordinates,
        })
        .collect())
}

/// Whole-model check: configuration, seed and an optional gradient fault.
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub config: ModelConfig,
    pub mode: Mode,
    pub seed: u64,
    pub eps: f64,
    /// Relative error injected into every analytic gradient.
    pub fault: Option<f64>,
}

impl ModelCheck {
    pub fn tiny(mode: Mode) -> Self {
        ModelCheck {
            config: ModelConfig::tiny(),
            mode,
            seed: 0,
            eps: 1e-5,
            fault: None,
        }
    }
}

/// Audio frames and lip frames of the random utterance used by [`check_model`].
pub const CHECK_AUDIO_LEN: usize = 4;
pub const CHECK_VIDEO_LEN: usize = 2;

/// Finite-difference check of the training loss (cross-entropy plus, for
/// models with an AU head, the AU term) over every parameter, in training
/// mode with fixed dropout masks.
pub fn check_model(check: &ModelCheck) -> Result<Vec<GroupError>> {
    let model = Model::<f64>::new(check.config.clone(), check.mode, check.seed)?;
    let mut rng = Rng::new(check.seed).split(1);
    let audio = Tensor::from_fn(vec![CHECK_AUDIO_LEN, crate::signal::AUDIO_FEATURE_DIM], |_| rng.normal());
    let lips = Tensor::from_fn(vec![CHECK_VIDEO_LEN, crate::visual::LIP_SIZE, crate::visual::LIP_SIZE, 3], |_| {
        rng.uniform(0.0, 255.0)
    });
    let au = Tensor::from_fn(vec![CHECK_VIDEO_LEN, check.config.n_au], |_| rng.uniform(0.0, 1.0));
    let vocab = check.config.vocab_size;
    let chars: Vec<usize> = (0..3).map(|_| EOS + 1 + rng.below(vocab - EOS - 1)).collect();
    let prefix: Vec<usize> = std::iter::once(SOS).chain(chars.iter().copied()).collect();
    let targets: Vec<Option<usize>> = chars.iter().copied().chain(std::iter::once(EOS)).map(Some).collect();
    let lambda = if check.mode.has_au_head() { 1.0 } else { 0.0 };

    let loss = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let a = g.input(audio.clone());
        let v = check.mode.has_video().then(|| g.input(lips.clone()));
        let fwd = model.net.forward(g, a, v, &prefix)?;
        let au = (lambda != 0.0).then_some(&au);
        model.net.loss(g, &fwd, &targets, au, lambda)
    };
    let fault = check.fault;
    check_parameters_with(&model.store, loss, check.eps, Some(check.seed), |grads| {
        if let Some(f) = fault {
            grads.scale(1.0 + f);
        }
    })
}
