//! Toy network: a norm-preserving input embedding, a stack of parallel
//! blocks sharing the first layer's attention values, and a norm-preserving
//! output head.
//!
//! Parameters are held as a flat list of [`ParamTensor`]s named
//! `embed.weight`, `blocks.{l}.<group>` and `head.weight`, in that order.

use serde::{Deserialize, Serialize};

use crate::block::{
    block_backward, block_forward, timestep_embedding, BlockCache, BlockConfig, BlockParams,
    GateOffset, PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::manifold::sphere_init;
use crate::numcore::{matmul, matmul_nt, matmul_tn, rms, Matrix, RngStream};
use crate::optim::{classify_param, ParamTensor};
use crate::rope3d::{grid_positions, FreqConfig, Position3, RopeLayer};
use crate::task::Sample;

/// Groups per block, matching [`PARAM_NAMES`].
pub const GROUPS_PER_BLOCK: usize = PARAM_NAMES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub head_dim: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Token grid `(t, h, w)`; sequences have `t·h·w` tokens.
    pub grid: (usize, usize, usize),
    pub gate: GateOffset,
    pub rope: FreqConfig,
}

impl ModelConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d: self.width,
            n_heads: self.width / self.head_dim.max(1),
            layer_count: self.depth,
            gate: self.gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config(
                "width, depth, d_in and d_out must be >= 1".into(),
            ));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 || self.width % self.head_dim != 0 {
            return Err(Error::Config(format!(
                "head_dim must be even and divide width, got head_dim {} for width {}",
                self.head_dim, self.width
            )));
        }
        if self.n_tokens() == 0 {
            return Err(Error::Config("token grid must be nonempty".into()));
        }
        self.block_config().validate()
    }
}

/// Dense weights for one forward/backward sweep.
#[derive(Clone, Debug)]
pub struct Weights {
    pub embed: Matrix,
    pub blocks: Vec<BlockParams>,
    pub head: Matrix,
}

/// Intermediates of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub input: Matrix,
    pub embedded: Matrix,
    pub caches: Vec<BlockCache>,
    /// Output stream of every block.
    pub hidden: Vec<Matrix>,
    pub output: Matrix,
}

/// Batch-averaged loss and gradients, in parameter order.
#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    /// Mean RMS of the embedding output, each block output and the head
    /// output, in that order.
    pub activation_rms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ToyNet {
    cfg: ModelConfig,
    params: Vec<ParamTensor>,
    ropes: Vec<RopeLayer>,
    positions: Vec<Position3>,
}

pub fn block_param_name(layer: usize, group: usize) -> String {
    format!("blocks.{layer}.{}", PARAM_NAMES[group])
}

fn is_linear_weight(group: usize) -> bool {
    PARAM_NAMES[group].ends_with(".weight")
}

impl ToyNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = RngStream::new(seed);
        let mut params = Vec::with_capacity(2 + cfg.depth * GROUPS_PER_BLOCK);
        let embed = sphere_init(cfg.width, cfg.d_in, &rng.derive(0))?.into_inner();
        params.push(ParamTensor::new(
            "embed.weight",
            embed,
            classify_param("embed.weight", 2, true),
        ));
        for l in 0..cfg.depth {
            let block = BlockParams::init(cfg.width, &rng.derive(100 + l as u64))?;
            for (g, value) in block.groups().into_iter().enumerate() {
                let name = block_param_name(l, g);
                let n_dims = if PARAM_NAMES[g].starts_with("lambda") {
                    0
                } else if PARAM_NAMES[g].ends_with(".bias") {
                    1
                } else {
                    2
                };
                let kind = classify_param(&name, n_dims, is_linear_weight(g));
                params.push(ParamTensor::new(name, value, kind));
            }
        }
        let head = sphere_init(cfg.d_out, cfg.width, &rng.derive(1))?.into_inner();
        params.push(ParamTensor::new(
            "head.weight",
            head,
            classify_param("head.weight", 2, true),
        ));
        let ropes = (0..cfg.depth)
            .map(|l| {
                let layer_seed = rng.derive(10_000 + l as u64).seed();
                RopeLayer::new(
                    cfg.width / cfg.head_dim,
                    cfg.head_dim,
                    layer_seed,
                    &cfg.rope,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let positions = grid_positions(cfg.grid.0, cfg.grid.1, cfg.grid.2);
        Ok(Self {
            cfg,
            params,
            ropes,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<ParamTensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "parameter count",
                self.params.len(),
                params.len(),
            ));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.name != new.name {
                return Err(Error::Config(format!(
                    "parameter `{}` found where `{}` was expected",
                    new.name, old.name
                )));
            }
            let (r, c) = old.shape();
            new.value.expect_shape(r, c, &new.name)?;
        }
        self.params = params;
        Ok(())
    }

    /// Index of the activation a parameter feeds, as laid out in
    /// [`BatchGrads::activation_rms`].
    pub fn owner(&self, param_index: usize) -> usize {
        if param_index == 0 {
            0
        } else if param_index == self.params.len() - 1 {
            self.cfg.depth + 1
        } else {
            1 + (param_index - 1) / GROUPS_PER_BLOCK
        }
    }

    /// Rotary embedding of each layer.
    pub fn ropes(&self) -> &[RopeLayer] {
        &self.ropes
    }

    pub fn weights(&self) -> Result<Weights> {
        let depth = self.cfg.depth;
        let blocks = (0..depth)
            .map(|l| {
                let start = 1 + l * GROUPS_PER_BLOCK;
                let groups = self.params[start..start + GROUPS_PER_BLOCK]
                    .iter()
                    .map(|p| p.value.clone())
                    .collect();
                BlockParams::from_groups(groups)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Weights {
            embed: self.params[0].value.clone(),
            blocks,
            head: self.params[self.params.len() - 1].value.clone(),
        })
    }

    pub fn forward(&self, w: &Weights, input: &Matrix, t: f64) -> Result<ForwardPass> {
        let n = self.cfg.n_tokens();
        input.expect_shape(n, self.cfg.d_in, "network input")?;
        let bc = self.cfg.block_config();
        let t_emb = timestep_embedding(t, self.cfg.width);
        let embedded = matmul_nt(input, &w.embed)?;
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.cfg.depth);
        let mut hidden = Vec::with_capacity(self.cfg.depth);
        let mut x = embedded.clone();
        for (l, (params, rope)) in w.blocks.iter().zip(&self.ropes).enumerate() {
            let v_first = if l == 0 { None } else { Some(&caches[0].v) };
            let (y, cache) =
                block_forward(&x, &t_emb, v_first, params, &bc, rope, &self.positions)?;
            caches.push(cache);
            hidden.push(y.clone());
            x = y;
        }
        let output = matmul_nt(&x, &w.head)?;
        Ok(ForwardPass {
            input: input.clone(),
            embedded,
            caches,
            hidden,
            output,
        })
    }

    /// Gradients of `Σ d_output ⊙ output` in parameter order.
    pub fn backward(
        &self,
        w: &Weights,
        pass: &ForwardPass,
        d_output: &Matrix,
    ) -> Result<Vec<Matrix>> {
        let depth = self.cfg.depth;
        let n = self.cfg.n_tokens();
        d_output.expect_shape(n, self.cfg.d_out, "output gradient")?;
        let bc = self.cfg.block_config();
        let last = pass
            .hidden
            .last()
            .ok_or_else(|| Error::contract("forward pass has no blocks"))?;
        let d_head = matmul_tn(d_output, last)?;
        let mut dx = matmul(d_output, &w.head)?;
        let mut dv_first = Matrix::zeros(n, self.cfg.width);
        let mut block_grads: Vec<Vec<Matrix>> = vec![Vec::new(); depth];
        for l in (0..depth).rev() {
            let extra = (l == 0).then_some(&dv_first);
            let g = block_backward(
                &w.blocks[l],
                &bc,
                &self.ropes[l],
                &pass.caches[l],
                &dx,
                extra,
            )?;
            if let Some(dv) = &g.dv_first {
                dv_first.add_assign(dv);
            }
            block_grads[l] = g.params.into_groups();
            dx = g.dx;
        }
        let d_embed = matmul_tn(&dx, &pass.input)?;
        let mut grads = Vec::with_capacity(self.params.len());
        grads.push(d_embed);
        grads.extend(block_grads.into_iter().flatten());
        grads.push(d_head);
        Ok(grads)
    }

    /// Mean squared error over the batch and its gradients.
    pub fn batch_grads(&self, w: &Weights, batch: &[Sample]) -> Result<BatchGrads> {
        if batch.is_empty() {
            return Err(Error::contract("batch must be nonempty"));
        }
        let count = (batch.len() * self.cfg.n_tokens() * self.cfg.d_out) as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Matrix> = Vec::new();
        let mut act = vec![0.0; self.cfg.depth + 2];
        for s in batch {
            s.target
                .expect_shape(self.cfg.n_tokens(), self.cfg.d_out, "target")?;
            let pass = self.forward(w, &s.input, s.t)?;
            let resid = pass.output.sub(&s.target);
            loss += resid.dot(&resid) / count;
            let g = self.backward(w, &pass, &resid.scale(2.0 / count))?;
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
            act[0] += rms(&pass.embedded)?;
            for (l, h) in pass.hidden.iter().enumerate() {
                act[l + 1] += rms(h)?;
            }
            act[self.cfg.depth + 1] += rms(&pass.output)?;
        }
        act.iter_mut().for_each(|a| *a /= batch.len() as f64);
        Ok(BatchGrads {
            loss,
            grads,
            activation_rms: act,
        })
    }

    /// Mean squared error without gradients.
    pub fn loss(&self, w: &Weights, batch: &[Sample]) -> Result<f64> {
        let count = (batch.len() * self.cfg.n_tokens() * self.cfg.d_out) as f64;
        let mut loss = 0.0;
        for s in batch {
            let pass = self.forward(w, &s.input, s.t)?;
            let resid = pass.output.sub(&s.target);
            loss += resid.dot(&resid) / count;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, relative_error, DEFAULT_EPS};
    use crate::optim::ParamKind;
    use crate::task::{SyntheticTask, TaskKind};

    fn cfg(depth: usize) -> ModelConfig {
        ModelConfig {
            width: 8,
            depth,
            head_dim: 4,
            d_in: 3,
            d_out: 2,
            grid: (1, 2, 2),
            gate: GateOffset::InvSqrtDepth,
            rope: FreqConfig::default(),
        }
    }

    #[test]
    fn layout_and_kinds() {
        let net = ToyNet::new(cfg(2), 0).unwrap();
        let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names.len(), 2 + 2 * GROUPS_PER_BLOCK);
        assert_eq!(names[0], "embed.weight");
        assert_eq!(names[1], "blocks.0.unified.weight");
        assert_eq!(names[GROUPS_PER_BLOCK + 1], "blocks.1.unified.weight");
        assert_eq!(*names.last().unwrap(), "head.weight");
        let np: Vec<&str> = net
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::NormPreserving)
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(
            np,
            [
                "embed.weight",
                "blocks.0.unified.weight",
                "blocks.0.mlp2.weight",
                "blocks.0.modulation.0.weight",
                "blocks.1.unified.weight",
                "blocks.1.mlp2.weight",
                "blocks.1.modulation.0.weight",
                "head.weight"
            ]
        );
        assert_eq!(net.owner(0), 0);
        assert_eq!(net.owner(1), 1);
        assert_eq!(net.owner(GROUPS_PER_BLOCK + 1), 2);
        assert_eq!(net.owner(net.params().len() - 1), 3);
    }

    #[test]
    fn set_params_checks_layout() {
        let mut net = ToyNet::new(cfg(1), 0).unwrap();
        let mut ps = net.params().to_vec();
        ps.swap(0, 1);
        assert!(net.set_params(ps).is_err());
        let mut ps = net.params().to_vec();
        ps[0].value = Matrix::zeros(1, 1);
        assert!(net.set_params(ps).is_err());
        let ps = net.params().to_vec();
        net.set_params(ps).unwrap();
    }

    /// Full-network gradients including the value-residual coupling between
    /// layer 0 and later layers.
    #[test]
    fn network_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut net = ToyNet::new(cfg(3), seed).unwrap();
            let mut rng = RngStream::new(seed + 50);
            // generic weights so no path is trivially zero
            for p in net.params_mut() {
                if p.value.max_abs() == 0.0 || p.name.contains("lambda") {
                    p.value =
                        Matrix::from_fn(p.value.rows(), p.value.cols(), |_, _| 0.4 * rng.normal());
                }
            }
            let task =
                SyntheticTask::new(TaskKind::SyntheticDenoise, 3, 2, 4, &rng.derive(1)).unwrap();
            let batch = task.batch(2, &mut rng.derive(2)).unwrap();
            let w = net.weights().unwrap();
            let analytic = net.batch_grads(&w, &batch).unwrap();
            for i in 0..net.params().len() {
                let base = net.params()[i].value.clone();
                let numeric = finite_diff_grad(
                    |v| {
                        let mut probe = net.clone();
                        probe.params_mut()[i].value =
                            Matrix::from_vec(base.rows(), base.cols(), v.to_vec()).unwrap();
                        probe.loss(&probe.weights().unwrap(), &batch).unwrap()
                    },
                    base.as_slice(),
                    DEFAULT_EPS,
                )
                .unwrap();
                let err = relative_error(analytic.grads[i].as_slice(), &numeric);
                assert!(err < 1e-4, "seed {seed} {}: {err}", net.params()[i].name);
            }
        }
    }
}
