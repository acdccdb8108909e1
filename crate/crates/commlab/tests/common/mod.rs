//! Shared helpers for integration tests: parameter enumeration over
//! agents and central-finite-difference gradient oracles.

#![allow(dead_code)]

use commlab::agent::{Agent, AgentGrads};
use commlab::numeric::Matrix;

/// Which parameter buffer a coordinate lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Encoder(usize),
    Decoder(usize),
    MuHead,
    LogvarHead,
}

/// One scalar parameter of an agent.
#[derive(Debug, Clone, Copy)]
pub struct ParamLoc {
    pub site: Site,
    pub weights: bool,
    pub idx: usize,
}

/// Every trainable scalar of the agent, in a stable order.
pub fn all_param_locs(agent: &Agent) -> Vec<ParamLoc> {
    let mut locs = Vec::new();
    for (l, layer) in agent.encoder().layers().iter().enumerate() {
        for idx in 0..layer.weights().data().len() {
            locs.push(ParamLoc { site: Site::Encoder(l), weights: true, idx });
        }
        for idx in 0..layer.bias().len() {
            locs.push(ParamLoc { site: Site::Encoder(l), weights: false, idx });
        }
    }
    for (l, layer) in agent.decoder().layers().iter().enumerate() {
        for idx in 0..layer.weights().data().len() {
            locs.push(ParamLoc { site: Site::Decoder(l), weights: true, idx });
        }
        for idx in 0..layer.bias().len() {
            locs.push(ParamLoc { site: Site::Decoder(l), weights: false, idx });
        }
    }
    if let Some((mu, logvar)) = agent.vae_head_layers() {
        for idx in 0..mu.weights().data().len() {
            locs.push(ParamLoc { site: Site::MuHead, weights: true, idx });
        }
        for idx in 0..mu.bias().len() {
            locs.push(ParamLoc { site: Site::MuHead, weights: false, idx });
        }
        for idx in 0..logvar.weights().data().len() {
            locs.push(ParamLoc { site: Site::LogvarHead, weights: true, idx });
        }
        for idx in 0..logvar.bias().len() {
            locs.push(ParamLoc { site: Site::LogvarHead, weights: false, idx });
        }
    }
    locs
}

pub fn get_param(agent: &Agent, loc: &ParamLoc) -> f64 {
    match loc.site {
        Site::Encoder(l) => {
            let layer = &agent.encoder().layers()[l];
            if loc.weights { layer.weights().data()[loc.idx] } else { layer.bias()[loc.idx] }
        }
        Site::Decoder(l) => {
            let layer = &agent.decoder().layers()[l];
            if loc.weights { layer.weights().data()[loc.idx] } else { layer.bias()[loc.idx] }
        }
        Site::MuHead => {
            let (mu, _) = agent.vae_head_layers().unwrap();
            if loc.weights { mu.weights().data()[loc.idx] } else { mu.bias()[loc.idx] }
        }
        Site::LogvarHead => {
            let (_, lv) = agent.vae_head_layers().unwrap();
            if loc.weights { lv.weights().data()[loc.idx] } else { lv.bias()[loc.idx] }
        }
    }
}

pub fn set_param(agent: &mut Agent, loc: &ParamLoc, value: f64) {
    match loc.site {
        Site::Encoder(l) => {
            let layer = &mut agent.encoder_mut().layers_mut()[l];
            let (w, b) = layer.params_mut();
            if loc.weights { w[loc.idx] = value } else { b[loc.idx] = value }
        }
        Site::Decoder(l) => {
            let layer = &mut agent.decoder_mut().layers_mut()[l];
            let (w, b) = layer.params_mut();
            if loc.weights { w[loc.idx] = value } else { b[loc.idx] = value }
        }
        Site::MuHead => {
            let (mu, _) = agent.vae_head_layers_mut().unwrap();
            let (w, b) = mu.params_mut();
            if loc.weights { w[loc.idx] = value } else { b[loc.idx] = value }
        }
        Site::LogvarHead => {
            let (_, lv) = agent.vae_head_layers_mut().unwrap();
            let (w, b) = lv.params_mut();
            if loc.weights { w[loc.idx] = value } else { b[loc.idx] = value }
        }
    }
}

/// The analytic gradient for a parameter coordinate.
pub fn grad_at(grads: &AgentGrads, loc: &ParamLoc) -> f64 {
    match loc.site {
        Site::Encoder(l) => {
            let g = &grads.encoder[l];
            if loc.weights { g.weights.data()[loc.idx] } else { g.bias[loc.idx] }
        }
        Site::Decoder(l) => {
            let g = &grads.decoder[l];
            if loc.weights { g.weights.data()[loc.idx] } else { g.bias[loc.idx] }
        }
        Site::MuHead => {
            let (g, _) = grads.heads.as_ref().unwrap();
            if loc.weights { g.weights.data()[loc.idx] } else { g.bias[loc.idx] }
        }
        Site::LogvarHead => {
            let (_, g) = grads.heads.as_ref().unwrap();
            if loc.weights { g.weights.data()[loc.idx] } else { g.bias[loc.idx] }
        }
    }
}

/// Central finite difference (h = 1e-4) of `loss` at parameter `loc`.
pub fn central_difference(
    agent: &Agent,
    loc: &ParamLoc,
    loss: &dyn Fn(&Agent) -> f64,
) -> f64 {
    let h = 1e-4;
    let base = get_param(agent, loc);
    let mut probe = agent.clone();
    set_param(&mut probe, loc, base + h);
    let plus = loss(&probe);
    set_param(&mut probe, loc, base - h);
    let minus = loss(&probe);
    (plus - minus) / (2.0 * h)
}

/// Relative closeness with a scale floor: finite-difference noise on
/// exactly-zero gradients must not register as relative error.
pub fn assert_rel_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    let rel = (analytic - numeric).abs() / scale;
    assert!(
        rel < 1e-4,
        "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})"
    );
}

/// True when any ReLU pre-activation of the stack (fed with `input`)
/// sits close enough to its kink that a central difference would
/// straddle it.
pub fn stack_has_kink(stack: &commlab::numeric::DenseStack, input: &Matrix) -> bool {
    let mut cur = input.clone();
    for layer in stack.layers() {
        let mut pre = cur.mul_transpose(layer.weights()).unwrap();
        pre.add_row_broadcast(layer.bias()).unwrap();
        if layer.activation() == commlab::numeric::Activation::Relu
            && pre.data().iter().any(|p| p.abs() < 2e-3)
        {
            return true;
        }
        cur = pre;
        for v in cur.data_mut() {
            *v = layer.activation().apply(*v);
        }
    }
    false
}

/// Uniform random batch in [0, 1].
pub fn random_unit_batch(
    rows: usize,
    cols: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Matrix {
    use rand::Rng;
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    m
}
