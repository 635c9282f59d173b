use super::config::ModelConfig;
use crate::numerics::rng::trunc_normal;
use crate::numerics::{Element, Streams, Tape, Tensor, Var};
use crate::Result;

/// Index of one tensor inside [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: NormIds,
    pub mlp: MlpIds,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub patch_embed: LinearIds,
    pub cls_token: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub embed: LinearIds,
    pub mask_token: ParamId,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
    pub pixel_head: LinearIds,
}

/// Where every learnable tensor lives.
#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
    /// Contrastive projection head.
    pub projector: MlpIds,
    /// Cross-scale predictor.
    pub predictor: MlpIds,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        ParamId(self.names.len() - 1)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIds {
        LinearIds {
            w: self.add(format!("{name}.w"), vec![din, dout], Init::TruncNormal),
            b: self.add(format!("{name}.b"), vec![dout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{name}.gamma"), vec![d], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![d], Init::Zeros),
        }
    }

    fn mlp(&mut self, name: &str, din: usize, hidden: usize, dout: usize) -> MlpIds {
        MlpIds {
            fc1: self.linear(&format!("{name}.fc1"), din, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, dout),
        }
    }

    fn block(&mut self, name: &str, d: usize, mlp_ratio: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), d),
            q: self.linear(&format!("{name}.attn.q"), d, d),
            k: self.linear(&format!("{name}.attn.k"), d, d),
            v: self.linear(&format!("{name}.attn.v"), d, d),
            o: self.linear(&format!("{name}.attn.o"), d, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            mlp: self.mlp(&format!("{name}.mlp"), d, d * mlp_ratio, d),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let e = &cfg.encoder;
    let d = &cfg.decoder;
    let mut b = Builder::default();
    let patch_embed = b.linear("enc.patch_embed", cfg.patch_dim(), e.width);
    let cls_token = e
        .use_cls_token
        .then(|| b.add("enc.cls_token".into(), vec![e.width], Init::TruncNormal));
    let blocks = (0..e.depth)
        .map(|i| b.block(&format!("enc.blocks.{i}"), e.width, e.mlp_ratio))
        .collect();
    let norm = b.norm("enc.norm", e.width);
    let encoder = EncoderIds {
        patch_embed,
        cls_token,
        blocks,
        norm,
    };
    let embed = b.linear("dec.embed", e.width, d.width);
    let mask_token = b.add("dec.mask_token".into(), vec![d.width], Init::TruncNormal);
    let blocks = (0..d.depth)
        .map(|i| b.block(&format!("dec.blocks.{i}"), d.width, d.mlp_ratio))
        .collect();
    let norm = b.norm("dec.norm", d.width);
    let pixel_head = b.linear("dec.pixel_head", d.width, cfg.patch_dim());
    let decoder = DecoderIds {
        embed,
        mask_token,
        blocks,
        norm,
        pixel_head,
    };
    let projector = b.mlp("proj", e.width, 2 * e.width, cfg.proj_dim);
    let predictor = b.mlp("pred", d.width, 2 * d.width, d.width);
    (
        Layout {
            encoder,
            decoder,
            projector,
            predictor,
        },
        b,
    )
}

/// Every learnable tensor of the two-branch model. Both scale branches read
/// this single set.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    /// Truncated-normal (σ = 0.02) weights and tokens, zero biases and
    /// layer-norm shifts, unit layer-norm scales. Tensor `i` draws from its
    /// own stream, so adding a tensor never perturbs the others.
    pub fn init(config: &ModelConfig, streams: &Streams) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .enumerate()
            .map(|(i, (shape, init))| match init {
                Init::Zeros => Tensor::zeros(shape.clone()),
                Init::Ones => Tensor::ones(shape.clone()),
                Init::TruncNormal => {
                    let mut r = streams.stream("init", &[i as u64]);
                    let n = shape.iter().product();
                    let d = (0..n)
                        .map(|_| T::of(trunc_normal(&mut r, INIT_STD)))
                        .collect();
                    Tensor::from_parts(shape.clone(), d)
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: b.names,
            tensors,
        })
    }

    /// Rebuild from named tensors (checkpoint loading). Names and shapes must
    /// match the layout implied by `config` exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        if named.len() != b.names.len() {
            return Err(crate::Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(crate::Error::Incompatible(format!(
                    "parameter {name} {:?} does not match {want} {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: b.names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn replace(&mut self, tensors: Vec<Tensor<T>>) {
        assert_eq!(tensors.len(), self.tensors.len());
        self.tensors = tensors;
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Register every tensor as a trainable leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &'a Tape<T>) -> BoundModel<'a, T> {
        let vars = self.tensors.iter().map(|t| tape.param(t)).collect();
        BoundModel {
            tape,
            params: self,
            vars,
        }
    }

    /// Wrap leaves the caller already placed on `tape`, one per tensor in
    /// parameter order.
    pub fn bind_vars<'a>(&'a self, tape: &'a Tape<T>, vars: Vec<Var>) -> Result<BoundModel<'a, T>> {
        if vars.len() != self.tensors.len() {
            return Err(crate::Error::Consistency(format!(
                "{} variables for {} parameter tensors",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(BoundModel {
            tape,
            params: self,
            vars,
        })
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A parameter set registered on a tape; the forward passes live on this.
pub struct BoundModel<'a, T> {
    pub(crate) tape: &'a Tape<T>,
    pub(crate) params: &'a ModelParams<T>,
    vars: Vec<Var>,
}

impl<'a, T: Element> BoundModel<'a, T> {
    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn config(&self) -> &'a ModelConfig {
        &self.params.config
    }

    pub fn layout(&self) -> &'a Layout {
        &self.params.layout
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Leaf variables in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
