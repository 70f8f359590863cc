//! The assembled stylisation model: frozen encoders, auxiliary backends,
//! frozen adapters for swapped-in embedders, and the trainable generator.

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::autograd::{Tape, Var};
use crate::config::{PsuEmbedding, StyleSource, TextureSource, TrainConfig};
use crate::encoders::{DistinctiveEncoder, IdentityBackend, TextImageBackend, TextureEncoder};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{stack_dyn, unstack, ImageTensor};
use crate::nn::{Bound, Init, ParamStore};

/// Images per tape when encoding or generating outside training.
const CHUNK: usize = 8;

#[derive(Debug, Clone)]
pub struct StyleModel {
    pub config: TrainConfig,
    pub domain_names: Vec<String>,
    pub texture: TextureEncoder,
    pub classifier: DistinctiveEncoder,
    pub generator: Generator,
    pub identity: IdentityBackend,
    pub textimage: TextImageBackend,
    /// Frozen maps from identity or text-image embeddings to the style
    /// dimension: `ds_adapter.weight`, `div_adapter.weight`.
    pub adapters: ParamStore,
}

/// Every network of a [`StyleModel`] placed on one tape.
pub struct BoundModel<'t> {
    pub texture: Bound<'t, f32>,
    pub classifier: Bound<'t, f32>,
    pub generator: Bound<'t, f32>,
    pub adapters: Bound<'t, f32>,
}

/// Constant per-image quantities the training loop reuses.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Content feature, `C x CH x CW`.
    pub content: ArrayD<f32>,
    pub z_ds: Array1<f32>,
    pub z_div: Array1<f32>,
    /// Embedding compared by the style-prior term.
    pub psu: Array1<f32>,
    /// Texture activations at the contextual taps, each `C x H x W`.
    pub cx: Vec<ArrayD<f32>>,
    pub identity: Option<Array1<f32>>,
}

fn needs_identity(cfg: &TrainConfig) -> bool {
    cfg.texture == TextureSource::IdentityLike || cfg.style == StyleSource::IdentityLike || cfg.lambda_id > 0.0
}

fn needs_textimage(cfg: &TrainConfig) -> bool {
    cfg.style == StyleSource::TextimageLike || cfg.lambda_textimage > 0.0
}

fn row(v: &ArrayD<f32>, i: usize) -> Array1<f32> {
    v.index_axis(Axis(0), i).to_owned().into_dimensionality().expect("N x d rows")
}

impl StyleModel {
    /// Fresh texture encoder, adapters and generator around a pretrained
    /// classifier, all seeded from `config.seed`.
    pub fn new(config: TrainConfig, domain_names: Vec<String>, classifier: DistinctiveEncoder) -> Result<Self> {
        config.validate()?;
        let texture = TextureEncoder::new(config.texture_config(), config.seed.wrapping_add(1))?;
        let generator = Generator::new(config.generator_config()?, config.seed.wrapping_add(3))?;
        let identity = IdentityBackend::from_spec(&config.identity_backend)?;
        let textimage = TextImageBackend::from_spec(&config.textimage_backend, &domain_names)?;
        let d = config.style_dim;
        let mut init = Init::new(config.seed.wrapping_add(2));
        let mut adapters = ParamStore::new();
        match config.style {
            StyleSource::MfmLike => {}
            StyleSource::IdentityLike => {
                adapters.insert("ds_adapter.weight", init.normal(&[identity.dim()?, d], 1.0));
            }
            StyleSource::TextimageLike => {
                adapters.insert("ds_adapter.weight", init.normal(&[textimage.dim()?, d], 1.0));
            }
        }
        if config.texture == TextureSource::IdentityLike {
            adapters.insert("div_adapter.weight", init.normal(&[identity.dim()?, d], 1.0));
        }
        Self::from_parts(config, domain_names, texture, classifier, generator, adapters)
    }

    pub fn from_parts(
        config: TrainConfig,
        domain_names: Vec<String>,
        texture: TextureEncoder,
        classifier: DistinctiveEncoder,
        generator: Generator,
        adapters: ParamStore,
    ) -> Result<Self> {
        let identity = IdentityBackend::from_spec(&config.identity_backend)?;
        let textimage = TextImageBackend::from_spec(&config.textimage_backend, &domain_names)?;
        if needs_identity(&config) {
            identity.dim()?;
        }
        if needs_textimage(&config) {
            textimage.dim()?;
        }
        if classifier.cfg.style_dim != config.style_dim {
            return Err(Error::DimensionMismatch(classifier.cfg.style_dim, config.style_dim));
        }
        if classifier.cfg.n_classes != domain_names.len() {
            return Err(Error::InvalidConfig(format!(
                "classifier has {} classes for {} domains",
                classifier.cfg.n_classes,
                domain_names.len()
            )));
        }
        Ok(Self { config, domain_names, texture, classifier, generator, identity, textimage, adapters })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<f32>, train_generator: bool, train_classifier: bool) -> BoundModel<'t> {
        BoundModel {
            texture: self.texture.bind(tape),
            classifier: self.classifier.params.bind(tape, train_classifier),
            generator: self.generator.bind(tape, train_generator),
            adapters: self.adapters.bind(tape, false),
        }
    }

    pub fn content_var<'t>(&self, b: &BoundModel<'t>, x: Var<'t, f32>) -> Result<Var<'t, f32>> {
        self.texture.content(&b.texture, x)
    }

    pub fn ds_code_var<'t>(&self, b: &BoundModel<'t>, x: Var<'t, f32>) -> Result<Var<'t, f32>> {
        match self.config.style {
            StyleSource::MfmLike => Ok(self.classifier.forward(&b.classifier, x)?.0),
            StyleSource::IdentityLike => Ok(self.identity.embed_var(x)?.matmul(b.adapters.get("ds_adapter.weight"))),
            StyleSource::TextimageLike => Ok(self
                .textimage
                .embed_image_var(x, Some((&self.classifier, &b.classifier)))?
                .matmul(b.adapters.get("ds_adapter.weight"))),
        }
    }

    pub fn div_code_var<'t>(&self, b: &BoundModel<'t>, x: Var<'t, f32>) -> Result<Var<'t, f32>> {
        match self.config.texture {
            TextureSource::VggLike => self.texture.diversity(&b.texture, x),
            TextureSource::IdentityLike => Ok(self.identity.embed_var(x)?.matmul(b.adapters.get("div_adapter.weight"))),
        }
    }

    /// Embedding in which generated and reference images are compared by the
    /// style-prior term: the raw output of the style source or of the
    /// diversity source.
    pub fn psu_embedding_var<'t>(&self, b: &BoundModel<'t>, x: Var<'t, f32>) -> Result<Var<'t, f32>> {
        match (self.config.psu_embedding, self.config.style) {
            (PsuEmbedding::Texture, _) => match self.config.texture {
                TextureSource::VggLike => self.texture.diversity(&b.texture, x),
                TextureSource::IdentityLike => self.identity.embed_var(x),
            },
            (PsuEmbedding::Style, StyleSource::MfmLike) => Ok(self.classifier.forward(&b.classifier, x)?.0),
            (PsuEmbedding::Style, StyleSource::IdentityLike) => self.identity.embed_var(x),
            (PsuEmbedding::Style, StyleSource::TextimageLike) => {
                self.textimage.embed_image_var(x, Some((&self.classifier, &b.classifier)))
            }
        }
    }

    pub fn cx_taps_var<'t>(&self, b: &BoundModel<'t>, x: Var<'t, f32>) -> Result<Vec<Var<'t, f32>>> {
        let names: Vec<&str> = self.config.cx_taps.iter().map(String::as_str).collect();
        self.texture.taps(&b.texture, x, &names)
    }

    /// Unit text embedding of a domain's name, the prompt of the text-image term.
    pub fn prompt_embedding(&self, domain: usize) -> Result<Array1<f32>> {
        let name = self
            .domain_names
            .get(domain)
            .ok_or(Error::UnknownDomainId(domain))?;
        self.textimage.embed_text(name)
    }

    /// Constant encodings of `images`.
    pub fn encode(&self, images: &[&ImageTensor]) -> Result<Vec<Encoded>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let tape = Tape::<f32>::new();
            let b = self.bind(&tape, false, false);
            let x = tape.constant(stack_dyn(chunk));
            let content = self.content_var(&b, x)?.value();
            let z_ds = self.ds_code_var(&b, x)?.value();
            let z_div = self.div_code_var(&b, x)?.value();
            let psu = self.psu_embedding_var(&b, x)?.value();
            let cx: Vec<_> = self.cx_taps_var(&b, x)?.into_iter().map(|v| v.value()).collect();
            let identity = if self.config.lambda_id > 0.0 { Some(self.identity.embed_var(x)?.value()) } else { None };
            for i in 0..chunk.len() {
                out.push(Encoded {
                    content: content.index_axis(Axis(0), i).to_owned(),
                    z_ds: row(&z_ds, i),
                    z_div: row(&z_div, i),
                    psu: row(&psu, i),
                    cx: cx.iter().map(|c| c.index_axis(Axis(0), i).to_owned()).collect(),
                    identity: identity.as_ref().map(|e| row(e, i)),
                });
            }
        }
        Ok(out)
    }

    /// Runs the generator on encoded content and style.
    pub fn generate_encoded(&self, contents: &[&Encoded], styles: &[&Encoded]) -> Result<Vec<ImageTensor>> {
        if contents.len() != styles.len() {
            return Err(Error::DimensionMismatch(contents.len(), styles.len()));
        }
        let tape = Tape::<f32>::new();
        let gp = self.generator.bind(&tape, false);
        let con = tape.constant(stack_rows(contents.iter().map(|e| &e.content)));
        let z_ds = tape.constant(stack_codes(styles.iter().map(|e| &e.z_ds)));
        let z_div = tape.constant(stack_codes(styles.iter().map(|e| &e.z_div)));
        let out = self.generator.forward(&gp, con, z_ds, z_div)?;
        Ok(unstack(&out.value()))
    }

    /// `G(content, style)`.
    pub fn generate(&self, content: &ImageTensor, style: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.generate_batch(&[content], &[style])?.remove(0))
    }

    pub fn generate_batch(&self, contents: &[&ImageTensor], styles: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        if contents.len() != styles.len() {
            return Err(Error::DimensionMismatch(contents.len(), styles.len()));
        }
        let mut out = Vec::with_capacity(contents.len());
        for (c, s) in contents.chunks(CHUNK).zip(styles.chunks(CHUNK)) {
            let ec = self.encode(c)?;
            let es = self.encode(s)?;
            out.extend(self.generate_encoded(&ec.iter().collect::<Vec<_>>(), &es.iter().collect::<Vec<_>>())?);
        }
        Ok(out)
    }

    /// Classifier embeddings used as FID/KID features, one row per image.
    pub fn metric_features(&self, images: &[&ImageTensor]) -> Result<Array2<f64>> {
        let d = self.classifier.cfg.style_dim;
        let mut out = Array2::<f64>::zeros((images.len(), d));
        for (k, chunk) in images.chunks(CHUNK).enumerate() {
            let tape = Tape::<f32>::new();
            let p = self.classifier.bind(&tape);
            let (emb, _) = self.classifier.forward(&p, tape.constant(stack_dyn(chunk)))?;
            let v = emb.value();
            for i in 0..chunk.len() {
                for j in 0..d {
                    out[[k * CHUNK + i, j]] = v[[i, j]] as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Stacks equally shaped arrays along a new leading axis.
pub fn stack_rows<'a>(items: impl Iterator<Item = &'a ArrayD<f32>>) -> ArrayD<f32> {
    let views: Vec<_> = items.map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

/// Stacks equal-length codes into an `N x d` matrix.
pub fn stack_codes<'a>(items: impl Iterator<Item = &'a Array1<f32>>) -> ArrayD<f32> {
    let views: Vec<_> = items.map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal lengths").into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::DistinctiveConfig;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(-1.0f32..1.0)))
    }

    fn model(cfg: TrainConfig) -> StyleModel {
        let cls = DistinctiveEncoder::new(cfg.classifier_config(3), 1).unwrap();
        StyleModel::new(cfg, vec!["a".into(), "b".into(), "c".into()], cls).unwrap()
    }

    #[test]
    fn generate_shape_range_and_batch_agreement() {
        let m = model(TrainConfig::desk());
        let (c, s) = (img(1), img(2));
        let out = m.generate(&c, &s).unwrap();
        assert_eq!(out.shape(), [3, 64, 64]);
        assert!(out.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        let batch = m.generate_batch(&[&c, &s], &[&s, &c]).unwrap();
        assert!(batch[0].mse(&out) < 1e-10);
    }

    #[test]
    fn encodings_follow_the_sources() {
        let cfg = TrainConfig::desk();
        let m = model(cfg.clone());
        let e = &m.encode(&[&img(3)]).unwrap()[0];
        assert_eq!(e.content.shape(), &[128, 8, 8]);
        assert_eq!((e.z_ds.len(), e.z_div.len(), e.psu.len()), (128, 128, 128));
        assert_eq!(e.cx[0].shape(), &[64, 16, 16]);
        assert!(e.identity.is_none());

        let swapped = model(TrainConfig { style: StyleSource::IdentityLike, texture: TextureSource::IdentityLike, lambda_id: 1.0, ..cfg.clone() });
        let e2 = &swapped.encode(&[&img(3)]).unwrap()[0];
        assert_eq!((e2.z_ds.len(), e2.z_div.len(), e2.psu.len()), (128, 128, 64));
        assert_eq!(e2.identity.as_ref().unwrap().len(), 64);

        let ti = model(TrainConfig { style: StyleSource::TextimageLike, ..cfg.clone() });
        assert_eq!(ti.encode(&[&img(3)]).unwrap()[0].psu.len(), 3);
        assert!(ti.prompt_embedding(1).unwrap()[1] > 0.99);

        let tex = model(TrainConfig { psu_embedding: PsuEmbedding::Texture, ..cfg });
        let e3 = &tex.encode(&[&img(3)]).unwrap()[0];
        assert_eq!(e3.psu, e3.z_div);
    }

    #[test]
    fn content_tap_changes_generator_input() {
        let cfg = TrainConfig { content_tap: "relu3_2".into(), ..TrainConfig::desk() };
        let m = model(cfg);
        assert_eq!(m.encode(&[&img(4)]).unwrap()[0].content.shape(), &[64, 16, 16]);
        assert_eq!(m.generate(&img(4), &img(5)).unwrap().shape(), [3, 64, 64]);
    }

    #[test]
    fn backend_and_classifier_mismatches_are_rejected() {
        let cfg = TrainConfig { style: StyleSource::IdentityLike, identity_backend: "none".into(), ..TrainConfig::desk() };
        let cls = DistinctiveEncoder::new(cfg.classifier_config(2), 1).unwrap();
        assert!(matches!(
            StyleModel::new(cfg, vec!["a".into(), "b".into()], cls),
            Err(Error::NoBackendRegistered(_))
        ));
        let cls = DistinctiveEncoder::new(DistinctiveConfig::desk(3), 1).unwrap();
        assert!(StyleModel::new(TrainConfig::desk(), vec!["a".into(), "b".into()], cls).is_err());
    }

    #[test]
    fn metric_features_are_classifier_embeddings() {
        let m = model(TrainConfig::desk());
        let imgs: Vec<ImageTensor> = (0..10).map(img).collect();
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let f = m.metric_features(&refs).unwrap();
        assert_eq!(f.dim(), (10, 128));
        let single = m.classifier.distinctive_code(&imgs[9]).unwrap();
        for j in 0..128 {
            assert!((f[[9, j]] - single.values[j] as f64).abs() < 1e-5);
        }
    }
}
