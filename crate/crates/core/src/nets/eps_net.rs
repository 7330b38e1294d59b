use std::borrow::Cow;
use std::sync::Arc;

use super::{Cond, NetConfig, NetError, ParamSet};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::teacher::GmmTeacher;
use crate::tensor::{Activation, Feed, Graph, Tensor};

/// How the trunk weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// LeCun-normal weights, zero biases.
    Standard,
    /// Output layer zeroed: the trunk predicts exactly zero.
    ZeroHead,
    /// Last hidden layer zeroed while the head stays random: the trunk still
    /// predicts exactly zero, but gradients and adapters can reach the output.
    ZeroLastHidden,
}

/// Output of a forward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Head {
    Eps,
    /// `(x - sigma * eps) / alpha`.
    Reparam { alpha: f64, sigma: f64 },
}

/// Which bound tensors receive gradients.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct GradTargets {
    pub base: bool,
    pub adapter: bool,
    pub input: bool,
}

/// Sinusoidal embedding of integer timesteps, `[sin(t f_i), cos(t f_i)]` with
/// geometrically spaced frequencies `f_i = 10000^(-i / half)`.
pub fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * f).sin());
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * f).cos());
        }
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

/// Noise-prediction network `eps(x_t, t, y)`.
///
/// The trunk is an MLP over `[x_t, time_embed(t), cond_embed(y)]`. The
/// condition table has `num_classes + 1` rows; the last row is the null token.
/// When a GMM prior is attached its closed-form `eps*` is added to the trunk
/// output as a constant, so the trunk learns a correction.
#[derive(Debug, Clone)]
pub struct EpsNet {
    config: NetConfig,
    sched: Arc<NoiseSchedule>,
    params: ParamSet,
    prior: Option<Arc<GmmTeacher>>,
}

pub(crate) fn layer_w(i: usize) -> String {
    format!("l{i}.w")
}

pub(crate) fn layer_b(i: usize) -> String {
    format!("l{i}.b")
}

pub(crate) const COND_TABLE: &str = "cond_embed";

impl EpsNet {
    pub fn new(
        config: NetConfig,
        sched: Arc<NoiseSchedule>,
        init: Init,
        rng: &mut RngStream,
    ) -> Result<Self, NetError> {
        config.validate()?;
        if init == Init::ZeroLastHidden && config.activation == Activation::Sigmoid {
            return Err(NetError::Config(
                "zeroed hidden layer needs an activation with f(0) = 0".into(),
            ));
        }
        let mut params = ParamSet::new();
        let table_rows = config.num_classes + 1;
        params.insert(
            COND_TABLE,
            rng.normal_tensor(&[table_rows, config.cond_dim]),
        );
        let dims = config.layer_dims();
        let head = dims.len() - 1;
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let zero = match init {
                Init::Standard => false,
                Init::ZeroHead => i == head,
                Init::ZeroLastHidden => i + 1 == head,
            };
            let w = if zero {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let scale = (1.0 / fan_in as f64).sqrt();
                rng.normal_tensor(&[fan_in, fan_out]).map(|v| v * scale)
            };
            params.insert(layer_w(i), w);
            params.insert(layer_b(i), Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            config,
            sched,
            params,
            prior: None,
        })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_parts(
        config: NetConfig,
        sched: Arc<NoiseSchedule>,
        mut params: ParamSet,
        prior: Option<Arc<GmmTeacher>>,
    ) -> Result<Self, NetError> {
        let template = Self::new(config.clone(), sched.clone(), Init::ZeroHead, &mut RngStream::new(0, "template"))?;
        if !template.params.same_structure(&params) {
            return Err(NetError::Structure(
                "stored parameters do not match the architecture".into(),
            ));
        }
        params.set_requires_grad(false);
        let net = Self {
            config,
            sched,
            params,
            prior: None,
        };
        match prior {
            Some(p) => net.with_prior(p),
            None => Ok(net),
        }
    }

    /// Adds a closed-form GMM prior to the output.
    pub fn with_prior(mut self, gmm: Arc<GmmTeacher>) -> Result<Self, NetError> {
        if gmm.data_dim() != self.config.data_dim || gmm.num_classes() != self.config.num_classes {
            return Err(NetError::Config(format!(
                "prior has {} classes in {}-D, net expects {} in {}-D",
                gmm.num_classes(),
                gmm.data_dim(),
                self.config.num_classes,
                self.config.data_dim
            )));
        }
        if gmm.schedule().spec() != self.sched.spec() {
            return Err(NetError::Config("prior and net use different schedules".into()));
        }
        self.prior = Some(gmm);
        Ok(self)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.sched
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn prior(&self) -> Option<&Arc<GmmTeacher>> {
        self.prior.as_ref()
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    /// Index of the null-condition row.
    pub fn null_token(&self) -> usize {
        self.config.num_classes
    }

    /// Number of trunk linear layers including the head.
    pub fn num_layers(&self) -> usize {
        self.config.hidden.len() + 1
    }

    /// Checks a condition id; the null token id maps to [`Cond::Null`].
    pub fn resolve(&self, y: Cond) -> Result<Cond, NetError> {
        let k = self.config.num_classes;
        let check = |c: usize| {
            if c < k {
                Ok(c)
            } else {
                Err(NetError::Condition { id: c, classes: k })
            }
        };
        Ok(match y {
            Cond::Class(c) if c == k => Cond::Null,
            Cond::Class(c) => Cond::Class(check(c)?),
            Cond::Null => Cond::Null,
            Cond::Lerp { from, to, t } => Cond::Lerp {
                from: check(from)?,
                to: check(to)?,
                t,
            },
        })
    }

    /// `eps(x_t, t, y)` row by row; no gradients are tracked.
    pub fn eps_forward(&self, x: &Tensor, ts: &[usize], y: &[Cond]) -> Result<Tensor, NetError> {
        Ok(self
            .run(x, ts, y, None, GradTargets::default(), Head::Eps)?
            .1)
    }

    /// Same timestep and condition for every row.
    pub fn eps_at(&self, x: &Tensor, t: usize, y: Cond) -> Result<Tensor, NetError> {
        let n = x.rows();
        self.eps_forward(x, &vec![t; n], &vec![y; n])
    }

    /// Forward pass that keeps the graph so gradients can be taken w.r.t.
    /// the parameters and `x`.
    pub fn eps_forward_graph(
        &self,
        x: &Tensor,
        ts: &[usize],
        y: &[Cond],
    ) -> Result<(Graph, Tensor), NetError> {
        self.run(
            x,
            ts,
            y,
            None,
            GradTargets {
                base: true,
                adapter: false,
                input: true,
            },
            Head::Eps,
        )
    }

    /// Builds and evaluates the forward graph. The output node is named `out`.
    pub(crate) fn run(
        &self,
        x: &Tensor,
        ts: &[usize],
        y: &[Cond],
        adapter: Option<(&ParamSet, f64)>,
        grads: GradTargets,
        head: Head,
    ) -> Result<(Graph, Tensor), NetError> {
        let n = x.rows();
        if x.shape().len() != 2 || x.cols() != self.config.data_dim {
            return Err(NetError::Config(format!(
                "x must be [B, {}], got {:?}",
                self.config.data_dim,
                x.shape()
            )));
        }
        if ts.len() != n || y.len() != n {
            return Err(NetError::Config(format!(
                "batch of {n} rows with {} timesteps and {} conditions",
                ts.len(),
                y.len()
            )));
        }
        for &t in ts {
            self.sched.check(t)?;
        }
        let conds: Vec<Cond> = y.iter().map(|&c| self.resolve(c)).collect::<Result<_, _>>()?;

        // Lerp conditions get extra table rows appended after the null token.
        let base_table = self.params.get(COND_TABLE).expect("cond table");
        let mut extra_rows: Vec<Vec<f64>> = Vec::new();
        let mut idx = Vec::with_capacity(n);
        for c in &conds {
            let row = match *c {
                Cond::Class(k) => k,
                Cond::Null => self.null_token(),
                Cond::Lerp { from, to, t } => {
                    let (a, b) = (base_table.row(from), base_table.row(to));
                    extra_rows.push(a.iter().zip(b).map(|(u, v)| (1.0 - t) * u + t * v).collect());
                    self.null_token() + extra_rows.len()
                }
            };
            idx.push(row as f64);
        }
        let ext_table = (!extra_rows.is_empty()).then(|| {
            let mut rows: Vec<Vec<f64>> = (0..base_table.rows()).map(|r| base_table.row(r).to_vec()).collect();
            rows.extend(extra_rows);
            Tensor::from_rows(&rows)
        });

        let temb = time_embedding(ts, self.config.time_dim);
        let idx = Tensor::vector(idx);
        let prior = match &self.prior {
            Some(gmm) => {
                let weights: Vec<Vec<f64>> = conds
                    .iter()
                    .map(|c| self.prior_weights(gmm, *c))
                    .collect::<Result<_, _>>()?;
                Some(gmm.eps_star_rows(x, ts, &weights)?)
            }
            None => None,
        };

        let base: Cow<ParamSet> = flagged(&self.params, grads.base);
        let adapters: Option<(Cow<ParamSet>, f64)> =
            adapter.map(|(p, scale)| (flagged(p, grads.adapter), scale));
        let x_in: Cow<Tensor> = if grads.input {
            Cow::Owned(x.clone().with_grad())
        } else if x.requires_grad() {
            Cow::Owned(x.detach())
        } else {
            Cow::Borrowed(x)
        };

        let mut graph = self.build_graph(adapters.as_ref().map(|(_, s)| *s), prior.is_some(), head);
        let mut feed: Feed = Feed::new();
        base.extend_feed(&mut feed);
        if let Some((p, _)) = &adapters {
            p.extend_feed(&mut feed);
        }
        if let Some(t) = &ext_table {
            feed.insert(COND_TABLE, t);
        }
        feed.insert("x", &x_in);
        feed.insert("temb", &temb);
        feed.insert("cond_idx", &idx);
        if let Some(p) = &prior {
            feed.insert("prior", p);
        }
        let mut out = graph.forward_eval(&feed)?;
        let y = out.remove("out").expect("graph output");
        Ok((graph, y))
    }

    fn prior_weights(&self, gmm: &GmmTeacher, c: Cond) -> Result<Vec<f64>, NetError> {
        Ok(match c {
            Cond::Class(k) => gmm.class_weights(Some(k))?,
            Cond::Null => gmm.class_weights(None)?,
            Cond::Lerp { from, to, t } => {
                let mut w = vec![0.0; gmm.num_classes()];
                w[from] += 1.0 - t;
                w[to] += t;
                w
            }
        })
    }

    fn build_graph(&self, lora_scale: Option<f64>, with_prior: bool, head: Head) -> Graph {
        let mut g = Graph::new();
        let x = g.input("x");
        let temb = g.input("temb");
        let idx = g.input("cond_idx");
        let table = g.input(COND_TABLE);
        let e = g.gather(table, idx);
        let mut h = g.concat(&[x, temb, e]);
        let last = self.num_layers() - 1;
        for i in 0..=last {
            let w = g.input(&layer_w(i));
            let b = g.input(&layer_b(i));
            let mut z = g.matmul(h, w);
            z = g.add(z, b);
            if let (Some(scale), true) = (lora_scale, i < last) {
                let a = g.input(&super::lora::lora_a(i));
                let bb = g.input(&super::lora::lora_b(i));
                let down = g.matmul(h, a);
                let up = g.matmul(down, bb);
                let delta = g.affine(up, scale, 0.0);
                z = g.add(z, delta);
            }
            h = if i < last {
                g.pointwise(z, self.config.activation)
            } else {
                z
            };
        }
        let mut eps = h;
        if with_prior {
            let p = g.input("prior");
            eps = g.add(eps, p);
        }
        let out = match head {
            Head::Eps => eps,
            Head::Reparam { alpha, sigma } => {
                let scaled_eps = g.affine(eps, -sigma / alpha, 0.0);
                let scaled_x = g.affine(x, 1.0 / alpha, 0.0);
                g.add(scaled_x, scaled_eps)
            }
        };
        g.output("out", out);
        g
    }
}

fn flagged(p: &ParamSet, on: bool) -> Cow<'_, ParamSet> {
    if p.iter().all(|(_, t)| t.requires_grad() == on) {
        Cow::Borrowed(p)
    } else {
        let mut c = p.clone();
        c.set_requires_grad(on);
        Cow::Owned(c)
    }
}
