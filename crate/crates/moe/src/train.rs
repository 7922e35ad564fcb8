use compass_core::{AdamW, AdamWConfig, Session};
use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::error::Result;
use crate::hook::NoHook;
use crate::model::{usage_entropy, MoeModel};

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(rename = "L_LM")]
    pub l_lm: f64,
    #[serde(rename = "L_aux")]
    pub l_aux: f64,
    #[serde(rename = "L_Z")]
    pub l_z: f64,
    /// Sum over MTP depths.
    #[serde(rename = "L_MTP")]
    pub l_mtp: f64,
    pub alpha: f64,
    pub beta: f64,
    pub expert_usage_entropy: f64,
}

pub struct Trainer {
    pub model: MoeModel,
    pub opt: AdamW,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: MoeModel, opt: AdamWConfig) -> Self {
        let opt = AdamW::new(opt, &model.params);
        Self {
            model,
            opt,
            step: 0,
        }
    }

    pub fn train_step(&mut self, batch: &TokenBatch) -> Result<StepLog> {
        let mut sess = Session::train(&self.model.params);
        let fwd = self.model.forward(&mut sess, batch, &mut NoHook)?;
        let loss = self.model.objective(&mut sess, &fwd, self.step)?;
        sess.backward(loss)?;
        let out = self.model.summarize(&sess, &fwd, self.step);
        let grads = sess.param_grads();
        drop(sess);
        self.model.params.set_grads(grads)?;
        self.opt.step(&mut self.model.params)?;
        let log = StepLog {
            step: self.step,
            l_lm: out.l_lm,
            l_aux: out.l_aux,
            l_z: out.l_z,
            l_mtp: out.l_mtp.iter().sum(),
            alpha: out.coefficients.alpha,
            beta: out.coefficients.beta,
            expert_usage_entropy: usage_entropy(&out.decisions),
        };
        self.step += 1;
        Ok(log)
    }
}
