//! The trainable talking-head model: audio encoder plus, for each edited
//! style layer, a posterior, a flow prior, a smoother and a manipulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioEncoder;
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowDims};
use crate::manipulation::{gaussian_kernel, Manipulator, Smoother};
use crate::params::ParamStore;
use crate::posterior::{PosteriorBlock, PosteriorDims, PosteriorOut};
use crate::prior::{Prior, PriorCondition, PriorDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensor_io::Archive;
use crate::types::StylePlus;

/// Modules owned by one edited style layer.
#[derive(Clone, Debug)]
pub struct LayerModules {
    pub posterior: PosteriorBlock,
    pub prior: Prior,
    pub flow: Flow,
    pub smoother: Smoother,
    pub manip: Manipulator,
}

#[derive(Clone, Debug)]
pub struct TalkerModel<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub audio: AudioEncoder,
    pub layers: Vec<LayerModules>,
    /// Set once the flow actnorms have seen their first batch.
    pub actnorm_ready: bool,
}

impl<S: Scalar> TalkerModel<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let condition = PriorCondition::parse(&cfg.prior_condition)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let audio = AudioEncoder::new(
            &mut store,
            cfg.audio_context,
            cfg.audio_raw_dim(),
            cfg.audio_hidden,
            cfg.audio_dim,
            &mut rng,
        );
        let (d, dm, da) = (cfg.style_dim, cfg.motion_dim, cfg.audio_dim);
        let mut layers = Vec::with_capacity(cfg.edit_layers);
        for i in 0..cfg.edit_layers {
            let posterior = PosteriorBlock::new(
                &mut store,
                &format!("layer{i}.posterior"),
                PosteriorDims {
                    style_dim: d,
                    audio_dim: da,
                    stem: cfg.posterior_stem,
                    stem_out: cfg.posterior_stem_out,
                    audio_proj: cfg.posterior_audio,
                    hidden: cfg.posterior_hidden,
                    motion_dim: dm,
                },
                &mut rng,
            );
            let prior = Prior::new(
                &mut store,
                &format!("layer{i}.prior"),
                PriorDims {
                    style_dim: d,
                    audio_dim: da,
                    audio_proj: cfg.prior_audio,
                    hidden: cfg.prior_hidden,
                    motion_dim: dm,
                    condition,
                },
                &mut rng,
            );
            let flow = Flow::new(
                &mut store,
                &format!("layer{i}.flow"),
                FlowDims {
                    motion_dim: dm,
                    audio_dim: da,
                    hidden: cfg.flow_hidden,
                    scale_bound: cfg.flow_scale_bound,
                },
                cfg.flow_steps,
                &mut rng,
            )?;
            let smoother = Smoother::new(
                &mut store,
                &format!("layer{i}.smooth"),
                da + dm,
                cfg.control_channels,
                gaussian_kernel(cfg.smooth_kernel, cfg.smooth_sigma),
                cfg.conv_kernel,
                &mut rng,
            );
            let manip = Manipulator::new(
                &mut store,
                &format!("layer{i}.manip"),
                d,
                cfg.control_channels,
                cfg.gate_bias_init,
                &mut rng,
            );
            layers.push(LayerModules {
                posterior,
                prior,
                flow,
                smoother,
                manip,
            });
        }
        Ok(TalkerModel {
            cfg: cfg.clone(),
            store,
            audio,
            layers,
            actnorm_ready: cfg.flow_steps == 0,
        })
    }

    pub fn edit_layers(&self) -> usize {
        self.layers.len()
    }

    /// Audio features `[T*B x d_a]` from raw audio `[T*B x d_raw]`.
    pub fn encode_audio(&self, g: &mut Graph<S>, audio_raw: Var, batch: usize) -> Var {
        self.audio.encode(g, &self.store, audio_raw, batch)
    }

    /// Columns of layer `i` from flattened codes `[n x L*D]`.
    pub fn layer_codes(&self, g: &mut Graph<S>, styles: Var, i: usize) -> Var {
        let d = self.cfg.style_dim;
        g.slice_cols(styles, i * d, d)
    }

    pub fn posterior(&self, g: &mut Graph<S>, i: usize, w: Var, a: Var, batch: usize) -> PosteriorOut {
        self.layers[i].posterior.params(g, &self.store, w, a, batch)
    }

    /// Control vectors of layer `i` from features and latents.
    pub fn controls(&self, g: &mut Graph<S>, i: usize, a: Var, m: Var, batch: usize) -> Var {
        let x = g.concat_cols(&[a, m]);
        self.layers[i].smoother.forward(g, &self.store, x, batch)
    }

    pub fn manipulate(&self, g: &mut Graph<S>, i: usize, w_ref: Var, c: Var) -> Var {
        self.layers[i].manip.forward(g, &self.store, w_ref, c)
    }

    /// Output codes `[T x L*D]` for one sequence: edited layers from the
    /// latents `ms` (one `[T x d_m]` per edited layer), the rest copied from
    /// the reference.
    pub fn decode(&self, w_ref: &StylePlus<S>, audio_raw: &Tensor<S>, ms: &[Tensor<S>]) -> Result<Tensor<S>> {
        let t = audio_raw.rows;
        let (l, d) = (self.cfg.style_layers, self.cfg.style_dim);
        if w_ref.layers() != l || w_ref.dim() != d {
            return Err(Error::Shape("reference code does not match the model".into()));
        }
        if ms.len() != self.edit_layers() {
            return Err(Error::Contract(format!(
                "expected latents for {} layers, got {}",
                self.edit_layers(),
                ms.len()
            )));
        }
        if ms.iter().any(|m| m.rows != t || m.cols != self.cfg.motion_dim) {
            return Err(Error::Shape("latent sequence does not match the audio length".into()));
        }
        let mut out = Tensor::zeros(t, l * d);
        if t == 0 {
            return Ok(out);
        }
        let mut g = Graph::new();
        let av = g.constant(audio_raw.clone());
        let a = self.encode_audio(&mut g, av, 1);
        for (i, m) in ms.iter().enumerate() {
            let mv = g.constant(m.clone());
            let c = self.controls(&mut g, i, a, mv, 1);
            let wr = g.constant(Tensor::row_vector(w_ref.layer(i).to_vec()));
            let w = self.manipulate(&mut g, i, wr, c);
            let w = g.value(w);
            for r in 0..t {
                out.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(w.row(r));
            }
        }
        for r in 0..t {
            for i in self.edit_layers()..l {
                out.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(w_ref.layer(i));
            }
        }
        Ok(out)
    }

    /// Posterior latents for one sequence: the mean, or a draw from `rng`.
    pub fn posterior_latents(
        &self,
        styles: &Tensor<S>,
        audio_raw: &Tensor<S>,
        mean_only: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<Tensor<S>>> {
        if styles.rows != audio_raw.rows {
            return Err(Error::Shape(format!(
                "{} style frames vs {} audio frames",
                styles.rows, audio_raw.rows
            )));
        }
        let dm = self.cfg.motion_dim;
        if styles.rows == 0 {
            return Ok(vec![Tensor::zeros(0, dm); self.edit_layers()]);
        }
        let mut g = Graph::new();
        let sv = g.constant(styles.clone());
        let av = g.constant(audio_raw.clone());
        let a = self.encode_audio(&mut g, av, 1);
        let mut out = Vec::with_capacity(self.edit_layers());
        for i in 0..self.edit_layers() {
            let w = self.layer_codes(&mut g, sv, i);
            let post = self.posterior(&mut g, i, w, a, 1);
            let mut m = g.value(post.mu).clone();
            if !mean_only {
                let eps: Tensor<S> = crate::prob::standard_normal(rng, styles.rows, dm);
                let ls = g.value(post.log_sigma);
                for ((v, &e), &s) in m.data.iter_mut().zip(&eps.data).zip(&ls.data) {
                    *v += s.exp() * e;
                }
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Prior latents for one sequence, seeded by the reference code.
    pub fn prior_latents(&self, w_ref: &StylePlus<S>, audio_raw: &Tensor<S>, rng: &mut impl Rng) -> Vec<Tensor<S>> {
        let dm = self.cfg.motion_dim;
        if audio_raw.rows == 0 {
            return vec![Tensor::zeros(0, dm); self.edit_layers()];
        }
        let a = {
            let mut g = Graph::new();
            let av = g.constant(audio_raw.clone());
            let a = self.encode_audio(&mut g, av, 1);
            g.value(a).clone()
        };
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w0 = Tensor::row_vector(w_ref.layer(i).to_vec());
                l.prior.sample(&self.store, &l.flow, &a, &w0, 1, rng)
            })
            .collect()
    }

    /// Parameters, actnorm status and configuration as an archive.
    pub fn to_archive(&self) -> Archive<S> {
        let mut a = Archive::new();
        a.set_meta("kind", "model");
        a.set_meta("config_hash", self.cfg.architecture_hash());
        a.set_meta("config", self.cfg.to_kv_string());
        a.set_meta("actnorm_ready", self.actnorm_ready);
        for (_, p) in self.store.iter() {
            a.push(format!("param.{}", p.name), p.value.clone());
        }
        a
    }

    /// Rebuild from an archive written under a configuration with the same
    /// architecture as `cfg`.
    pub fn from_archive(a: &Archive<S>, cfg: &ModelConfig) -> Result<Self> {
        if a.meta("kind")? != "model" && a.meta("kind")? != "checkpoint" {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        if a.meta("config_hash")? != cfg.architecture_hash() {
            return Err(Error::Config(
                "checkpoint was written under a different model configuration".into(),
            ));
        }
        let mut m = TalkerModel::new(cfg, 0)?;
        m.store.load_values(&a.group("param"))?;
        m.actnorm_ready = a.meta("actnorm_ready")? == "true";
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::standard_normal;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            style_layers: 4,
            edit_layers: 2,
            style_dim: 6,
            motion_dim: 4,
            audio_dim: 3,
            posterior_stem: 5,
            posterior_stem_out: 4,
            posterior_audio: 3,
            posterior_hidden: 5,
            prior_hidden: 5,
            prior_audio: 3,
            flow_steps: 2,
            flow_hidden: 4,
            control_channels: 7,
            audio_hidden: 5,
            ..ModelConfig::default()
        }
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let v = store.value_mut(id);
            *v = Tensor::zeros(v.rows, v.cols);
        }
    }

    #[test]
    fn decode_copies_fine_layers_and_halves_at_zero() {
        let cfg = small_cfg();
        let mut model = TalkerModel::<f64>::new(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = StylePlus::new(standard_normal(&mut rng, 4, 6)).unwrap();
        let audio = standard_normal(&mut rng, 7, cfg.audio_raw_dim());
        let ms: Vec<Tensor<f64>> = (0..2).map(|_| standard_normal(&mut rng, 7, 4)).collect();
        let out = model.decode(&w, &audio, &ms).unwrap();
        for r in 0..7 {
            assert_eq!(&out.row(r)[12..18], w.layer(2));
            assert_eq!(&out.row(r)[18..24], w.layer(3));
        }
        zero_all(&mut model.store);
        let out = model.decode(&w, &audio, &ms).unwrap();
        for r in 0..7 {
            for i in 0..12 {
                assert_eq!(out.get(r, i), 0.5 * w.flat()[i]);
            }
        }
        assert!(model.decode(&w, &audio, &ms[..1]).is_err());
        let empty = model.decode(&w, &Tensor::zeros(0, cfg.audio_raw_dim()), &[Tensor::zeros(0, 4), Tensor::zeros(0, 4)]).unwrap();
        assert_eq!(empty.rows, 0);
    }

    #[test]
    fn latents_change_only_their_layer() {
        let cfg = small_cfg();
        let model = TalkerModel::<f64>::new(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = StylePlus::new(standard_normal(&mut rng, 4, 6)).unwrap();
        let audio = standard_normal(&mut rng, 6, cfg.audio_raw_dim());
        let mut ms: Vec<Tensor<f64>> = (0..2).map(|_| standard_normal(&mut rng, 6, 4)).collect();
        let base = model.decode(&w, &audio, &ms).unwrap();
        ms[1] = ms[1].map(|v| v + 1.0);
        let moved = model.decode(&w, &audio, &ms).unwrap();
        for r in 0..6 {
            assert_eq!(&base.row(r)[..6], &moved.row(r)[..6]);
            assert_ne!(&base.row(r)[6..12], &moved.row(r)[6..12]);
        }
    }

    #[test]
    fn archive_round_trip_and_hash_check() {
        let cfg = small_cfg();
        let model = TalkerModel::<f32>::new(&cfg, 5).unwrap();
        let a = model.to_archive();
        let back = TalkerModel::<f32>::from_archive(&Archive::decode(&a.encode()).unwrap(), &cfg).unwrap();
        assert_eq!(back.store.fingerprint(), model.store.fingerprint());
        let other = ModelConfig {
            motion_dim: 6,
            ..cfg.clone()
        };
        assert!(matches!(TalkerModel::<f32>::from_archive(&a, &other), Err(Error::Config(_))));
        let run_only = ModelConfig {
            learning_rate: 0.5,
            ..cfg
        };
        assert!(TalkerModel::<f32>::from_archive(&a, &run_only).is_ok());
    }

    #[test]
    fn sampling_paths_are_seeded() {
        let cfg = small_cfg();
        let model = TalkerModel::<f64>::new(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = StylePlus::new(standard_normal(&mut rng, 4, 6)).unwrap();
        let styles = standard_normal(&mut rng, 5, 24);
        let audio = standard_normal(&mut rng, 5, cfg.audio_raw_dim());
        let p1 = model.prior_latents(&w, &audio, &mut ChaCha8Rng::seed_from_u64(9));
        let p2 = model.prior_latents(&w, &audio, &mut ChaCha8Rng::seed_from_u64(9));
        let p3 = model.prior_latents(&w, &audio, &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(p1, p2);
        assert_ne!(p1, p3);
        let q1 = model.posterior_latents(&styles, &audio, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let q2 = model.posterior_latents(&styles, &audio, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(q1, q2);
        assert!(model.posterior_latents(&styles, &audio.slice_rows(0, 4), true, &mut rng).is_err());
    }
}
