//! Plain f64 re-implementation of the encoder loss, written loop by loop
//! with no shared code, used as the finite-difference oracle.

use std::collections::BTreeMap;

use kmask_core::encoder::{Batch, ModelConfig};
use kmask_core::textnorm::PAD;
use kmask_core::train::PreparedBatch;
use kmask_core::Encoder;

pub struct RefModel {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, Vec<f64>>,
}

type Mat = Vec<Vec<f64>>;

impl RefModel {
    pub fn from_encoder(e: &Encoder) -> Self {
        let params = e
            .params
            .iter()
            .map(|(_, name, t)| (name.to_owned(), t.data.iter().map(|&x| x as f64).collect()))
            .collect();
        RefModel {
            cfg: e.config.clone(),
            params,
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params[name]
    }

    /// `x · W + b` with `W` stored `[in, out]`.
    fn affine(&self, x: &Mat, w: &str, b: &str) -> Mat {
        let w = self.p(w);
        let b = self.p(b);
        let out = b.len();
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|j| {
                        b[j] + row
                            .iter()
                            .enumerate()
                            .map(|(i, v)| v * w[i * out + j])
                            .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    fn layer_norm(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        let eps = self.cfg.ln_eps as f64;
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                let rs = 1.0 / (var + eps).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) * rs * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    /// Hidden states for one sequence of length `len`.
    fn encode(&self, ids: &[u32], types: &[u32], pos: &[u32]) -> Mat {
        let h = self.cfg.hidden;
        let row =
            |table: &str, i: u32| self.p(table)[i as usize * h..(i as usize + 1) * h].to_vec();
        let emb: Mat = (0..ids.len())
            .map(|t| {
                let (a, b, c) = (
                    row("emb.token", ids[t]),
                    row("emb.type", types[t]),
                    row("emb.position", pos[t]),
                );
                (0..h).map(|k| a[k] + b[k] + c[k]).collect()
            })
            .collect();
        let mut x = self.layer_norm(&emb, "emb.ln");
        let nh = self.cfg.heads;
        let dh = h / nh;
        for l in 0..self.cfg.layers {
            let n = |s: &str| format!("layer.{l}.{s}");
            let q = self.affine(&x, &n("attn.q.weight"), &n("attn.q.bias"));
            let k = self.affine(&x, &n("attn.k.weight"), &n("attn.k.bias"));
            let v = self.affine(&x, &n("attn.v.weight"), &n("attn.v.bias"));
            let len = ids.len();
            let mut ctx = vec![vec![0.0; h]; len];
            for head in 0..nh {
                let off = head * dh;
                for i in 0..len {
                    let scores: Vec<f64> = (0..len)
                        .map(|j| {
                            if ids[j] == PAD {
                                return f64::NEG_INFINITY;
                            }
                            (0..dh).map(|d| q[i][off + d] * k[j][off + d]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..len {
                        for d in 0..dh {
                            ctx[i][off + d] += e[j] / z * v[j][off + d];
                        }
                    }
                }
            }
            let attn = self.affine(&ctx, &n("attn.o.weight"), &n("attn.o.bias"));
            let hh = self.layer_norm(&Self::add(&attn, &x), &n("attn.ln"));
            let mut f = self.affine(&hh, &n("ffn.in.weight"), &n("ffn.in.bias"));
            for r in &mut f {
                for v in r.iter_mut() {
                    *v = Self::gelu(*v);
                }
            }
            let f = self.affine(&f, &n("ffn.out.weight"), &n("ffn.out.bias"));
            x = self.layer_norm(&Self::add(&f, &hh), &n("ffn.ln"));
        }
        x
    }

    fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits[target] - m - z.ln()
    }

    /// Mean masked-token cross-entropy, plus the mean real/fake
    /// cross-entropy when the batch carries labels.
    pub fn loss(&self, batch: &PreparedBatch) -> f64 {
        let b = Batch::from_examples(&batch.examples);
        let (h, v) = (self.cfg.hidden, self.cfg.vocab_size);
        let table = if self.cfg.tie_mlm {
            "emb.token"
        } else {
            "mlm.weight"
        };
        let (mut mlm, mut n_mlm, mut cls) = (0.0, 0usize, 0.0);
        for (s, e) in batch.examples.iter().enumerate() {
            let r = s * b.len..(s + 1) * b.len;
            let x = self.encode(
                &b.input_ids[r.clone()],
                &b.type_ids[r.clone()],
                &b.position_ids[r],
            );
            for (&p, &label) in e.mask_positions.iter().zip(&e.labels) {
                let logits: Vec<f64> = (0..v)
                    .map(|t| {
                        self.p("mlm.bias")[t]
                            + (0..h)
                                .map(|k| x[p][k] * self.p(table)[t * h + k])
                                .sum::<f64>()
                    })
                    .collect();
                mlm -= Self::log_softmax_at(&logits, label as usize);
                n_mlm += 1;
            }
            if let Some(real) = &batch.is_real {
                let logits = &self.affine(&x[..1].to_vec(), "rf.weight", "rf.bias")[0];
                cls -= Self::log_softmax_at(logits, real[s] as usize);
            }
        }
        let mut total = if n_mlm == 0 { 0.0 } else { mlm / n_mlm as f64 };
        if batch.is_real.is_some() {
            total += cls / batch.examples.len() as f64;
        }
        total
    }
}
