use alloc::format;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng;

/// Scores one memory per row from `[H_t ; H_{t,k}]`: two linear layers with a
/// residual connection and layer normalization, then a scalar head.
///
/// The scalar head starts at zero, so a fresh network weights every memory
/// equally.
#[derive(Debug, Clone)]
pub struct WeightNet<T: Scalar> {
    pub d_model: usize,
    pub params: ParamStore<T>,
    ids: Ids,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    score_w: ParamId,
    score_b: ParamId,
}

impl<T: Scalar> WeightNet<T> {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, "weightnet");
        let mut p = ParamStore::new();
        let d = d_model;
        let ids = Ids {
            w1: p.add("w1", ParamStore::xavier(2 * d, d, &mut rng)),
            b1: p.add("b1", Tensor::zeros(&[d])),
            w2: p.add("w2", ParamStore::xavier(d, d, &mut rng)),
            b2: p.add("b2", Tensor::zeros(&[d])),
            ln_g: p.add("ln.gamma", Tensor::from_parts(alloc::vec![d], alloc::vec![T::ONE; d])),
            ln_b: p.add("ln.beta", Tensor::zeros(&[d])),
            score_w: p.add("score.w", Tensor::zeros(&[d, 1])),
            score_b: p.add("score.b", Tensor::zeros(&[1])),
        };
        WeightNet {
            d_model,
            params: p,
            ids,
        }
    }

    pub fn from_params(d_model: usize, params: ParamStore<T>) -> Result<Self> {
        let mut net = WeightNet::init(d_model, 0);
        if params.len() != net.params.len() {
            return Err(Error::invalid(format!(
                "weighting network expects {} tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for id in net.params.ids().collect::<alloc::vec::Vec<_>>() {
            let name = alloc::string::String::from(net.params.name(id));
            let src = params
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("weighting network lacks {name}")))?;
            net.params.set(id, params.get(src).clone())?;
        }
        Ok(net)
    }

    pub fn cast<U: Scalar>(&self) -> WeightNet<U> {
        WeightNet {
            d_model: self.d_model,
            params: self.params.cast(),
            ids: self.ids,
        }
    }

    pub fn check_dim(&self, d_model: usize) -> Result<()> {
        if d_model != self.d_model {
            return Err(Error::invalid(format!(
                "weighting network built for d_model {}, model has {d_model}",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Unnormalized scores `[rows, 1]` for rows of `h_t` and `h_tk`.
    pub fn scores(&self, g: &mut Graph<T>, h_t: Var, h_tk: Var) -> Result<Var> {
        let p = |g: &mut Graph<T>, id| g.param(&self.params, id);
        let u = g.concat(&[h_t, h_tk], 1)?;
        let (w1, b1, w2, b2) = (p(g, self.ids.w1), p(g, self.ids.b1), p(g, self.ids.w2), p(g, self.ids.b2));
        let h1 = g.linear(u, w1, Some(b1))?;
        let r = g.relu(h1)?;
        let h2 = g.linear(r, w2, Some(b2))?;
        let s = g.add(h1, h2)?;
        let (lg, lb) = (p(g, self.ids.ln_g), p(g, self.ids.ln_b));
        let n = g.layer_norm(s, Some((lg, lb)))?;
        let (sw, sb) = (p(g, self.ids.score_w), p(g, self.ids.score_b));
        g.linear(n, sw, Some(sb))
    }
}
