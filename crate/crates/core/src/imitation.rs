//! Recurrent imitation model of the low-level policy. Its final hidden
//! state, averaged over recent trajectories, is the teacher's context.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::ACTION_COUNT;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Matrix, Optimizer, ParamId, ParamStore, Var};
use crate::rng::seeded;

const HEAD_GAIN: f64 = 0.001;

/// Fixed-width policy representation handed to the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// (observation sequence, action sequence) of one agent.
pub type Sequence = (Vec<Vec<f64>>, Vec<usize>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImitationModel {
    obs_dim: usize,
    hidden: usize,
    params: ParamStore,
    w: ParamId,
    u: ParamId,
    b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    optimizer: Option<Adam>,
    batch_sequences: usize,
}

impl ImitationModel {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if obs_dim == 0 || hidden == 0 {
            return Err(Error::Config("imitation widths must be positive".into()));
        }
        let mut p = ParamStore::new();
        let w = p.add_glorot("imitation.W", obs_dim, 3 * hidden, 1.0, rng);
        let u = p.add_glorot("imitation.U", hidden, 3 * hidden, 1.0, rng);
        let b = p.add_zeros("imitation.b", 1, 3 * hidden);
        let head_w = p.add_glorot("imitation.head.w", hidden, ACTION_COUNT, HEAD_GAIN, rng);
        let head_b = p.add_zeros("imitation.head.b", 1, ACTION_COUNT);
        Ok(ImitationModel {
            obs_dim,
            hidden,
            params: p,
            w,
            u,
            b,
            head_w,
            head_b,
            optimizer: None,
            batch_sequences: 64,
        })
    }

    /// Rebuilds a model around stored parameters (fresh optimizer state).
    pub fn from_params(obs_dim: usize, hidden: usize, params: &ParamStore) -> Result<Self> {
        let mut m = ImitationModel::new(obs_dim, hidden, &mut seeded(0))?;
        m.params.load_from(params).map_err(Error::Checkpoint)?;
        Ok(m)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// One gated recurrent step on a batch of rows.
    fn cell(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (w, u, b) = (
            g.param(&self.params, self.w),
            g.param(&self.params, self.u),
            g.param(&self.params, self.b),
        );
        let xw = g.matmul(x, w);
        let xw = g.add_row(xw, b);
        let hu = g.matmul(h, u);
        let xz = g.slice_cols(xw, 0, hd);
        let hz = g.slice_cols(hu, 0, hd);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let xr = g.slice_cols(xw, hd, hd);
        let hr = g.slice_cols(hu, hd, hd);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let xn = g.slice_cols(xw, 2 * hd, hd);
        let hn = g.slice_cols(hu, 2 * hd, hd);
        let rh = g.mul(r, hn);
        let n = g.add(xn, rh);
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let d = g.sub(h, n);
        let zd = g.mul(z, d);
        g.add(n, zd)
    }

    fn head(&self, g: &mut Graph, h: Var) -> Var {
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        let l = g.matmul(h, w);
        g.add_row(l, b)
    }

    fn check(&self, seq: &[Vec<f64>]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::contract("observation sequence must be non-empty"));
        }
        if let Some(o) = seq.iter().find(|o| o.len() != self.obs_dim) {
            return Err(Error::contract(format!(
                "observation width {} differs from the model's {}",
                o.len(),
                self.obs_dim
            )));
        }
        Ok(())
    }

    /// Unrolls from a zero state; returns (T x |A| logits, T x hidden states).
    pub fn forward(&self, seq: &[Vec<f64>]) -> Result<(Matrix, Matrix)> {
        self.check(seq)?;
        let mut g = Graph::new();
        let mut h = g.input(Matrix::zeros(1, self.hidden));
        let (mut logits, mut hs) = (Vec::new(), Vec::new());
        for o in seq {
            let x = g.input(Matrix::row_vector(o));
            h = self.cell(&mut g, x, h);
            let l = self.head(&mut g, h);
            logits.push(g.value(l).as_slice().to_vec());
            hs.push(g.value(h).as_slice().to_vec());
        }
        g.check_finite()?;
        Ok((Matrix::from_rows(&logits), Matrix::from_rows(&hs)))
    }

    /// Mean negative log-likelihood over every step of `seqs` (batched by
    /// sorting on length and shrinking the active rows over time).
    fn batch_loss(&self, g: &mut Graph, seqs: &[&Sequence]) -> (Var, usize) {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by(|a, b| seqs[*b].0.len().cmp(&seqs[*a].0.len()).then(a.cmp(b)));
        let max_len = seqs[order[0]].0.len();
        let mut h = g.input(Matrix::zeros(order.len(), self.hidden));
        let mut terms = Vec::new();
        let mut count = 0;
        for t in 0..max_len {
            let active = order.iter().take_while(|i| seqs[**i].0.len() > t).count();
            let x = g.input(Matrix::from_rows(
                &order[..active].iter().map(|i| seqs[*i].0[t].clone()).collect::<Vec<_>>(),
            ));
            let h_prev = if active < g.value(h).rows() { g.slice_rows(h, 0, active) } else { h };
            h = self.cell(g, x, h_prev);
            let logits = self.head(g, h);
            let lp = g.log_softmax(logits);
            let acts: Vec<usize> = order[..active].iter().map(|i| seqs[*i].1[t]).collect();
            let picked = g.pick(lp, &acts);
            terms.push(g.sum(picked));
            count += active;
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t);
        }
        (g.scale(total, -1.0 / count as f64), count)
    }

    fn validate_data(&self, data: &[Sequence]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::contract("imitation dataset is empty"));
        }
        for (obs, acts) in data {
            self.check(obs)?;
            if obs.len() != acts.len() {
                return Err(Error::contract("observation and action sequences differ in length"));
            }
            if acts.iter().any(|a| *a >= ACTION_COUNT) {
                return Err(Error::contract("action index out of range"));
            }
        }
        Ok(())
    }

    /// Mean cross-entropy of the model's predictions on `data`.
    pub fn loss(&self, data: &[Sequence]) -> Result<f64> {
        self.validate_data(data)?;
        let mut total = 0.0;
        let mut count = 0;
        for chunk in data.chunks(256) {
            let refs: Vec<&Sequence> = chunk.iter().collect();
            let mut g = Graph::new();
            let (l, c) = self.batch_loss(&mut g, &refs);
            total += g.scalar(l) * c as f64;
            count += c;
        }
        Ok(total / count as f64)
    }

    /// Loss on one batch and a copy of the parameters carrying its gradients.
    pub fn gradient(&self, data: &[Sequence]) -> Result<(f64, ParamStore)> {
        self.validate_data(data)?;
        let refs: Vec<&Sequence> = data.iter().collect();
        let mut g = Graph::new();
        let (l, _) = self.batch_loss(&mut g, &refs);
        let mut store = self.params.clone();
        store.zero_grads();
        g.backward(l, &mut store)?;
        Ok((g.scalar(l), store))
    }

    /// Fraction of steps where the argmax prediction equals the action.
    pub fn accuracy(&self, data: &[Sequence]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for (obs, acts) in data {
            let (logits, _) = self.forward(obs)?;
            for (t, a) in acts.iter().enumerate() {
                hit += (crate::student::argmax(logits.row(t)) == *a) as usize;
                total += 1;
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// Adam on shuffled minibatches of sequences; returns the full-dataset
    /// loss after each epoch.
    pub fn train(&mut self, data: &[Sequence], epochs: usize, learning_rate: f64, seed: u64) -> Result<Vec<f64>> {
        self.validate_data(data)?;
        let mut rng = seeded(seed);
        let mut opt = match self.optimizer.take() {
            Some(mut o) => {
                o.learning_rate = learning_rate;
                o
            }
            None => Adam::new(learning_rate),
        };
        let mut trace = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.batch_sequences) {
                let refs: Vec<&Sequence> = chunk.iter().map(|i| &data[*i]).collect();
                let mut g = Graph::new();
                let (l, _) = self.batch_loss(&mut g, &refs);
                g.backward(l, &mut self.params)?;
                opt.step(&mut self.params);
            }
            trace.push(self.loss(data)?);
        }
        self.optimizer = Some(opt);
        Ok(trace)
    }

    /// Final hidden state of each trajectory, averaged elementwise.
    pub fn extract_context(&self, trajectories: &[Vec<Vec<f64>>]) -> Result<ContextVector> {
        if trajectories.is_empty() {
            return Err(Error::contract("need at least one trajectory"));
        }
        let mut acc = vec![0.0; self.hidden];
        for seq in trajectories {
            let (_, hs) = self.forward(seq)?;
            for (a, v) in acc.iter_mut().zip(hs.row(hs.rows() - 1)) {
                *a += v;
            }
        }
        let n = trajectories.len() as f64;
        Ok(ContextVector(acc.into_iter().map(|v| v / n).collect()))
    }
}
