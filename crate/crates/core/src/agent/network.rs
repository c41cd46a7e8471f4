use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Network architecture as named in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Single affine map from observation to logits; no critic.
    Linear,
    /// Convolutional torso plus a dense layer, separate for policy and
    /// critic; the critic carries an inner and an outer value head.
    ConvMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub hidden: usize,
}

impl NetworkSpec {
    pub fn linear() -> Self {
        NetworkSpec {
            architecture: Architecture::Linear,
            conv_channels: vec![],
            kernel_size: 3,
            hidden: 0,
        }
    }

    pub fn conv_mlp() -> Self {
        NetworkSpec {
            architecture: Architecture::ConvMlp,
            conv_channels: vec![16, 32],
            kernel_size: 3,
            hidden: 128,
        }
    }
}

/// Parameters of policy and critic, grouped by role.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams<T: Real = f64> {
    pub policy: Vec<Tensor<T>>,
    pub critic_torso: Vec<Tensor<T>>,
    pub inner_head: Vec<Tensor<T>>,
    pub outer_head: Vec<Tensor<T>>,
}

impl<T: Real> AgentParams<T> {
    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.policy
            .iter()
            .chain(&self.critic_torso)
            .chain(&self.inner_head)
            .chain(&self.outer_head)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.policy
            .iter_mut()
            .chain(self.critic_torso.iter_mut())
            .chain(self.inner_head.iter_mut())
            .chain(self.outer_head.iter_mut())
    }

    pub fn flatten(&self) -> Vec<Tensor<T>> {
        self.iter().cloned().collect()
    }

    /// Rebuilds the grouping of `self` from a flat list in `iter()` order.
    pub fn with_flat(&self, flat: Vec<Tensor<T>>) -> Result<Self> {
        let counts = [
            self.policy.len(),
            self.critic_torso.len(),
            self.inner_head.len(),
            self.outer_head.len(),
        ];
        if flat.len() != counts.iter().sum::<usize>() {
            return Err(Error::Shape(format!(
                "{} tensors for a parameter set of {}",
                flat.len(),
                counts.iter().sum::<usize>()
            )));
        }
        let mut it = flat.into_iter();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        Ok(AgentParams {
            policy: take(counts[0]),
            critic_torso: take(counts[1]),
            inner_head: take(counts[2]),
            outer_head: take(counts[3]),
        })
    }

    pub fn map<U: Real>(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<U>) -> AgentParams<U> {
        AgentParams {
            policy: self.policy.iter().map(&mut f).collect(),
            critic_torso: self.critic_torso.iter().map(&mut f).collect(),
            inner_head: self.inner_head.iter().map(&mut f).collect(),
            outer_head: self.outer_head.iter().map(&mut f).collect(),
        }
    }

    pub fn values(&self) -> AgentParams<f64> {
        self.map(|t| t.values())
    }

    pub fn tangents(&self) -> AgentParams<f64> {
        self.map(|t| t.tangents())
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|t| t.len()).sum()
    }
}

impl AgentParams<f64> {
    pub fn lift<T: Real>(&self) -> AgentParams<T> {
        self.map(|t| t.lift())
    }
}

/// Tape handles for a registered [`AgentParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub policy: Vec<Var>,
    pub critic_torso: Vec<Var>,
    pub inner_head: Vec<Var>,
    pub outer_head: Vec<Var>,
}

impl ParamVars {
    pub fn iter(&self) -> impl Iterator<Item = &Var> {
        self.policy
            .iter()
            .chain(&self.critic_torso)
            .chain(&self.inner_head)
            .chain(&self.outer_head)
    }
}

/// A network spec bound to an environment's observation and action spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub spec: NetworkSpec,
    pub obs_shape: Vec<usize>,
    pub num_actions: usize,
}

/// Random matrix with orthonormal rows or columns (whichever is fewer),
/// scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, m) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    // n vectors of length m, made orthonormal by modified Gram-Schmidt
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let d: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = v.split_at_mut(i);
            tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        v[i].iter_mut().for_each(|a| *a /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows >= cols { v[c][r] } else { v[r][c] };
        }
    }
    out
}

impl Agent {
    pub fn new(spec: NetworkSpec, obs_shape: Vec<usize>, num_actions: usize) -> Result<Self> {
        if spec.architecture == Architecture::ConvMlp {
            if obs_shape.len() != 3 {
                return Err(Error::Config(format!(
                    "conv-mlp needs [H, W, C] observations, got {obs_shape:?}"
                )));
            }
            if spec.conv_channels.is_empty() || spec.hidden == 0 || spec.kernel_size.is_multiple_of(2) {
                return Err(Error::Config(
                    "conv-mlp needs at least one conv layer, a hidden width, and an odd kernel".into(),
                ));
            }
        }
        Ok(Agent {
            spec,
            obs_shape,
            num_actions,
        })
    }

    pub fn has_critic(&self) -> bool {
        self.spec.architecture == Architecture::ConvMlp
    }

    fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    /// Conv stack followed by one dense layer; returns tensors in order
    /// (kernel, bias)* then (dense weight, dense bias).
    fn init_trunk(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let k = self.spec.kernel_size;
        let (h, w, mut c) = (self.obs_shape[0], self.obs_shape[1], self.obs_shape[2]);
        let mut out = Vec::new();
        for &o in &self.spec.conv_channels {
            let data = orthogonal(k * k * c, o, 2f64.sqrt(), rng);
            out.push(Tensor::new(vec![k, k, c, o], data).expect("kernel shape"));
            out.push(Tensor::zeros(&[o]));
            c = o;
        }
        let flat = h * w * c;
        out.push(Tensor::new(vec![flat, self.spec.hidden], orthogonal(flat, self.spec.hidden, 2f64.sqrt(), rng)).expect("dense shape"));
        out.push(Tensor::zeros(&[self.spec.hidden]));
        out
    }

    /// Fresh parameters; the final policy layer is zero so the initial policy
    /// is uniform.
    pub fn init(&self, seed: u64) -> AgentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.spec.architecture {
            Architecture::Linear => AgentParams {
                policy: vec![
                    Tensor::zeros(&[self.obs_len(), self.num_actions]),
                    Tensor::zeros(&[self.num_actions]),
                ],
                critic_torso: vec![],
                inner_head: vec![],
                outer_head: vec![],
            },
            Architecture::ConvMlp => {
                let hid = self.spec.hidden;
                let mut policy = self.init_trunk(&mut rng);
                policy.push(Tensor::zeros(&[hid, self.num_actions]));
                policy.push(Tensor::zeros(&[self.num_actions]));
                let critic_torso = self.init_trunk(&mut rng);
                let head = |rng: &mut ChaCha8Rng| {
                    vec![
                        Tensor::new(vec![hid, 1], orthogonal(hid, 1, 1.0, rng)).expect("head shape"),
                        Tensor::zeros(&[1]),
                    ]
                };
                let inner_head = head(&mut rng);
                let outer_head = head(&mut rng);
                AgentParams {
                    policy,
                    critic_torso,
                    inner_head,
                    outer_head,
                }
            }
        }
    }

    /// Registers every parameter tensor as a differentiable leaf.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, params: &AgentParams<T>) -> Result<ParamVars> {
        let mut reg = |ts: &[Tensor<T>]| -> Result<Vec<Var>> {
            ts.iter().map(|t| tape.param(t.clone())).collect()
        };
        Ok(ParamVars {
            policy: reg(&params.policy)?,
            critic_torso: reg(&params.critic_torso)?,
            inner_head: reg(&params.inner_head)?,
            outer_head: reg(&params.outer_head)?,
        })
    }

    /// Registers parameters as constants: no adjoints are accumulated.
    pub fn register_frozen<T: Real>(&self, tape: &mut Tape<T>, params: &AgentParams<T>) -> Result<ParamVars> {
        let mut reg = |ts: &[Tensor<T>]| -> Result<Vec<Var>> {
            ts.iter().map(|t| tape.constant(t.clone())).collect()
        };
        Ok(ParamVars {
            policy: reg(&params.policy)?,
            critic_torso: reg(&params.critic_torso)?,
            inner_head: reg(&params.inner_head)?,
            outer_head: reg(&params.outer_head)?,
        })
    }

    fn check_obs(&self, obs: &[usize]) -> Result<usize> {
        if obs.len() != self.obs_shape.len() + 1 || obs[1..] != self.obs_shape[..] {
            return Err(Error::Shape(format!(
                "observations {obs:?} do not match [N, {:?}]",
                self.obs_shape
            )));
        }
        Ok(obs[0])
    }

    fn trunk<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], obs: Var) -> Result<Var> {
        let n = self.check_obs(tape.value(obs).shape())?;
        let layers = self.spec.conv_channels.len();
        let mut x = obs;
        for l in 0..layers {
            x = tape.conv2d(x, p[2 * l])?;
            x = tape.bias_add(x, p[2 * l + 1])?;
            x = tape.relu(x)?;
        }
        let flat = tape.value(x).len() / n;
        x = tape.reshape(x, &[n, flat])?;
        x = tape.matmul(x, p[2 * layers])?;
        x = tape.bias_add(x, p[2 * layers + 1])?;
        tape.relu(x)
    }

    /// Action logits `[N, A]`.
    pub fn policy_logits<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], obs: Var) -> Result<Var> {
        let n = self.check_obs(tape.value(obs).shape())?;
        match self.spec.architecture {
            Architecture::Linear => {
                let x = tape.reshape(obs, &[n, self.obs_len()])?;
                let y = tape.matmul(x, p[0])?;
                tape.bias_add(y, p[1])
            }
            Architecture::ConvMlp => {
                let k = p.len();
                let h = self.trunk(tape, &p[..k - 2], obs)?;
                let y = tape.matmul(h, p[k - 2])?;
                tape.bias_add(y, p[k - 1])
            }
        }
    }

    /// Inner and outer value estimates `[N]` from one torso pass. The outer
    /// head reads the torso through a gradient stop.
    pub fn critic_values<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, obs: Var) -> Result<(Var, Var)> {
        if !self.has_critic() {
            return Err(Error::Config("the linear architecture has no critic".into()));
        }
        let n = self.check_obs(tape.value(obs).shape())?;
        let features = self.trunk(tape, &vars.critic_torso, obs)?;
        let head = |tape: &mut Tape<T>, f: Var, h: &[Var]| -> Result<Var> {
            let v = tape.matmul(f, h[0])?;
            let v = tape.bias_add(v, h[1])?;
            tape.reshape(v, &[n])
        };
        let inner = head(tape, features, &vars.inner_head)?;
        let blocked = tape.stop_gradient(features)?;
        let outer = head(tape, blocked, &vars.outer_head)?;
        Ok((inner, outer))
    }

    /// Action log-probabilities without recording gradients.
    pub fn log_probs<T: Real>(&self, params: &AgentParams<T>, obs: &Tensor) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p: Vec<Var> = params
            .policy
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<_>>()?;
        let o = tape.constant(obs.lift())?;
        let logits = self.policy_logits(&mut tape, &p, o)?;
        let lp = tape.log_softmax(logits)?;
        Ok(tape.value(lp).clone())
    }

    /// `(inner, outer)` values without recording gradients.
    pub fn values<T: Real>(&self, params: &AgentParams<T>, obs: &Tensor) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape, params)?;
        let o = tape.constant(obs.lift())?;
        let (i, o) = self.critic_values(&mut tape, &vars, o)?;
        Ok((tape.value(i).clone(), tape.value(o).clone()))
    }
}
