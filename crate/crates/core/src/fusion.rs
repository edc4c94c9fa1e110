//! Causally masked multi-head attention fusion of trunk, image and static
//! embeddings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Init, ParamId, ParamStore, Tensor, Var};
use crate::cde::CdeTrunk;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};

macro_rules! tag_enum {
    ($name:ident { $($variant:ident = $tag:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $(Self::$variant => $tag),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tag => Ok(Self::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

pub(crate) use tag_enum;

tag_enum!(FusionMode { Sum = "sum", Concat = "concat" });
tag_enum!(NormOrder { Pre = "pre", Post = "post" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub heads: usize,
    pub d_emb: usize,
    pub d_img: usize,
    pub d_stat: usize,
    pub norm_order: NormOrder,
    pub time_embedding: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Concat,
            heads: 4,
            d_emb: 16,
            d_img: 16,
            d_stat: 8,
            norm_order: NormOrder::Pre,
            time_embedding: false,
        }
    }
}

impl FusionConfig {
    pub fn d_model(&self) -> usize {
        match self.mode {
            FusionMode::Concat => self.d_emb + self.d_img + self.d_stat,
            FusionMode::Sum => self.d_emb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("d_model {d} is not divisible by {} heads", self.heads)));
        }
        if self.d_emb == 0 || self.d_img == 0 || self.d_stat == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.gamma], p[self.beta])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        let mut w = |n: &str| store.add(format!("{name}.{n}"), init.weight(&[d_model, d_model], d_model));
        Ok(Self {
            wq: w("W_Q")?,
            wk: w("W_K")?,
            wv: w("W_V")?,
            wo: w("W_O")?,
            heads,
            d_model,
        })
    }

    /// `softmax(Q Kᵀ / sqrt(d_k), causal) V` per head, heads concatenated and
    /// projected by `W_O`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (q, k, v) = (x.matmul(p[self.wq])?, x.matmul(p[self.wk])?, x.matmul(p[self.wv])?);
        let dk = self.d_model / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let heads = (0..self.heads)
            .map(|h| {
                let (qh, kh, vh) = (q.slice_last(h * dk, dk)?, k.slice_last(h * dk, dk)?, v.slice_last(h * dk, dk)?);
                qh.matmul(kh.t()?)?.scale(scale).causal_softmax()?.matmul(vh)
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat_last(&heads)?.matmul(p[self.wo])
    }

    /// Attention weights of head `h`, for inspection.
    pub fn weights<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: usize) -> Result<Var<'t>> {
        let dk = self.d_model / self.heads;
        let q = x.matmul(p[self.wq])?.slice_last(h * dk, dk)?;
        let k = x.matmul(p[self.wk])?.slice_last(h * dk, dk)?;
        q.matmul(k.t()?)?.scale(1.0 / (dk as f64).sqrt()).causal_softmax()
    }
}

/// Everything after the trunk: embedding map, fusion, attention block and
/// prediction head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionHead {
    pub config: FusionConfig,
    pub embed: Linear,
    pub img_proj: Option<Linear>,
    pub stat_proj: Option<Linear>,
    pub time_embed: Option<Linear>,
    pub ln1: LayerNormParams,
    pub attention: Attention,
    pub ln2: LayerNormParams,
    pub ffn: Mlp,
    pub hidden: Linear,
    pub out: Linear,
}

impl FusionHead {
    /// `trunk_width` is the trunk's hidden size `h`.
    pub fn new(store: &mut ParamStore, init: &mut Init, trunk_width: usize, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let embed = attach_embedding_head(store, init, trunk_width, config.d_emb)?;
        let (img_proj, stat_proj) = match config.mode {
            FusionMode::Sum => (
                Some(Linear::new(store, init, "fusion.img_proj", config.d_img, config.d_emb)?),
                Some(Linear::new(store, init, "fusion.stat_proj", config.d_stat, config.d_emb)?),
            ),
            FusionMode::Concat => (None, None),
        };
        let time_embed = config
            .time_embedding
            .then(|| Linear::new(store, init, "fusion.time", 1, d))
            .transpose()?;
        Ok(Self {
            config,
            embed,
            img_proj,
            stat_proj,
            time_embed,
            ln1: LayerNormParams::new(store, "fusion.ln1", d)?,
            attention: Attention::new(store, init, "fusion.attn", d, config.heads)?,
            ln2: LayerNormParams::new(store, "fusion.ln2", d)?,
            ffn: Mlp::new(store, init, "fusion.ffn", &[d, 4 * d, d])?,
            hidden: Linear::new(store, init, "fusion.hidden", d, d)?,
            out: Linear::new(store, init, "fusion.out", d, 1)?,
        })
    }

    /// Per-step tokens `[T, d_model]` from trunk embeddings `[T, d_emb]` and
    /// the time-invariant `[1, d_img]`, `[1, d_stat]` embeddings.
    pub fn fuse<'t>(&self, p: &Bound<'t>, trunk: Var<'t>, img: Var<'t>, stat: Var<'t>) -> Result<Var<'t>> {
        fuse_embeddings(
            trunk,
            img,
            stat,
            self.config.mode,
            self.img_proj.as_ref().map(|l| (l, p)),
            self.stat_proj.as_ref().map(|l| (l, p)),
        )
    }

    /// Attention block and head on `[T, d_model]` tokens; `[T, 1]` output.
    pub fn block_forward<'t>(&self, p: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let v = match self.config.norm_order {
            NormOrder::Pre => {
                let u = tokens.add(self.attention.forward(p, self.ln1.forward(p, tokens)?)?)?;
                u.add(self.ffn.forward(p, self.ln2.forward(p, u)?)?)?
            }
            NormOrder::Post => {
                let u = self.ln1.forward(p, tokens.add(self.attention.forward(p, tokens)?)?)?;
                self.ln2.forward(p, u.add(self.ffn.forward(p, u)?)?)?
            }
        };
        self.out.forward(p, self.hidden.forward(p, v)?.relu())
    }

    /// Trunk states `[T, h]` through to predictions `[T, 1]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        states: Var<'t>,
        img: Var<'t>,
        stat: Var<'t>,
        times: &[f64],
    ) -> Result<Var<'t>> {
        let emb = self.embed.forward(p, states)?;
        let mut tokens = self.fuse(p, emb, img, stat)?;
        if let Some(te) = &self.time_embed {
            let t = states.tape().leaf(Tensor::new(&[times.len(), 1], times.to_vec())?);
            tokens = tokens.add(te.forward(p, t)?)?;
        }
        self.block_forward(p, tokens)
    }
}

/// Concatenates or sums the trunk embedding with the broadcast image and
/// static embeddings. Sum mode needs both projections to `d_emb`.
pub fn fuse_embeddings<'t>(
    trunk: Var<'t>,
    img: Var<'t>,
    stat: Var<'t>,
    mode: FusionMode,
    img_proj: Option<(&Linear, &Bound<'t>)>,
    stat_proj: Option<(&Linear, &Bound<'t>)>,
) -> Result<Var<'t>> {
    let shape = trunk.shape();
    if shape.len() != 2 {
        return Err(Error::dim("fuse_embeddings", &[0, 0], &shape));
    }
    let rows = shape[0];
    match mode {
        FusionMode::Concat => Var::concat_last(&[trunk, img.tile_rows(rows)?, stat.tile_rows(rows)?]),
        FusionMode::Sum => {
            let (Some((ip, p)), Some((sp, _))) = (img_proj, stat_proj) else {
                return Err(Error::dim("fuse_embeddings", &[shape[1]], &[img.shape()[1], stat.shape()[1]]));
            };
            if ip.out_dim != shape[1] || sp.out_dim != shape[1] {
                return Err(Error::dim("fuse_embeddings", &[shape[1]], &[ip.out_dim, sp.out_dim]));
            }
            let extra = ip.forward(p, img)?.add(sp.forward(p, stat)?)?;
            trunk.add(extra.tile_rows(rows)?)
        }
    }
}

/// Fresh `h -> d_emb` embedding map replacing a forecasting head.
pub fn attach_embedding_head(store: &mut ParamStore, init: &mut Init, hidden: usize, d_emb: usize) -> Result<Linear> {
    Linear::new(store, init, "fusion.embed", hidden, d_emb)
}

/// Copies every trunk parameter of a pretrained forecaster into a new store,
/// dropping its readout, so a fusion head can be attached.
pub fn detach_trunk(pretrained: &ParamStore, trunk: &CdeTrunk) -> Result<(ParamStore, CdeTrunk)> {
    let mut store = ParamStore::new();
    let mut copy = |id: ParamId| -> Result<ParamId> {
        let name = &pretrained.names()[id.index()];
        store.add(name.clone(), pretrained.get(id).clone())
    };
    let init = Linear {
        weight: copy(trunk.init.weight)?,
        bias: copy(trunk.init.bias)?,
        ..trunk.init
    };
    let layers = trunk
        .field
        .layers
        .iter()
        .map(|l| {
            Ok(Linear {
                weight: copy(l.weight)?,
                bias: copy(l.bias)?,
                ..*l
            })
        })
        .collect::<Result<_>>()?;
    let trunk = CdeTrunk {
        config: trunk.config,
        init,
        field: Mlp { layers },
    };
    Ok((store, trunk))
}
