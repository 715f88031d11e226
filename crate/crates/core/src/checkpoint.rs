//! Binary weight containers and weight import.
//!
//! Two containers share one blob framing; both store all values as
//! little-endian f64 and are byte-deterministic for given weights.
//!
//! Blob framing, repeated in a fixed documented order:
//!
//! ```text
//! name_len: u32 LE | name: UTF-8 | rows: u32 LE | cols: u32 LE | rows*cols f64 LE
//! ```
//!
//! `EDCK1` (reference encoder-decoder checkpoint):
//!
//! ```text
//! magic "EDCK1"
//! config: 7 x u32 LE  (vocab_size, d_model, head_count, encoder_layers,
//!                      decoder_layers, ffw_width, max_positions)
//! blobs:  token_embed, pos_embed,
//!         encoder.{i}.self_attn.{wq,wk,wv,wo}, encoder.{i}.ffw.{w1,w2},
//!         encoder.{i}.ln_attn.{gain,bias}, encoder.{i}.ln_ffw.{gain,bias},
//!         decoder.{i}.self_attn.{wq,wk,wv,wo}, decoder.{i}.cross_attn.{wq,wk,wv,wo},
//!         decoder.{i}.ffw.{w1,w2}, decoder.{i}.ln_self.{gain,bias},
//!         decoder.{i}.ln_cross.{gain,bias}, decoder.{i}.ln_ffw.{gain,bias},
//!         v_proj
//! ```
//!
//! `MRSM1` (re-ranker model file) is identical except the magic, a 9-field
//! config block (vocab_size, d_model, head_count, encoder_layers,
//! interaction_layers, ffw_width, chunk_size, max_chunks, max_query_len),
//! and blob names that follow [`MoresModel::param_names`].
//!
//! Importing an `EDCK1` checkpoint maps the donor's encoder onto the
//! document encoder stack and its decoder onto the interaction stack; the
//! decoder-to-encoder attention weights become the query-to-document cross
//! attention weights, and the shared token embedding feeds both the chunk
//! and the query embedders. The computation flow of the donor model is
//! preserved, so a single-chunk forward reproduces the donor's
//! encoder-decoder forward.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoresModel, ScoringHead};
use crate::nn::{
    AttentionWeights, EncoderLayerWeights, FeedForwardWeights, InteractionLayerWeights,
    LayerNormParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EDCK1_MAGIC: &[u8; 5] = b"EDCK1";
pub const MRSM1_MAGIC: &[u8; 5] = b"MRSM1";

/// Dimensions of a reference encoder-decoder checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncDecConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub head_count: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffw_width: usize,
    pub max_positions: usize,
}

/// A reference encoder-decoder model: token/position embeddings shared by
/// encoder and decoder, encoder layers, decoder layers (self-attention,
/// cross attention to the encoder output, feed-forward), and a CLS
/// projection vector.
#[derive(Debug, Clone)]
pub struct EncDecCheckpoint {
    pub config: EncDecConfig,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub encoder: Vec<EncoderLayerWeights>,
    pub decoder: Vec<InteractionLayerWeights>,
    pub v_proj: Tensor,
}

impl EncDecCheckpoint {
    /// Random reference model; draw order is fixed by the seed.
    pub fn random(config: EncDecConfig, rng: &mut Rng) -> Result<Self> {
        if config.head_count == 0 || config.d_model % config.head_count != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide model width {}",
                config.head_count, config.d_model
            )));
        }
        let d = config.d_model;
        let token_embed = Tensor::uniform(config.vocab_size + 2, d, 0.1, rng);
        let pos_embed = Tensor::uniform(config.max_positions, d, 0.1, rng);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayerWeights::init(d, config.head_count, config.ffw_width, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|_| InteractionLayerWeights::init(d, config.head_count, config.ffw_width, rng))
            .collect::<Result<Vec<_>>>()?;
        let v_proj = Tensor::uniform(d, 1, 1.0 / (d as f64).sqrt(), rng);
        Ok(EncDecCheckpoint {
            config,
            token_embed,
            pos_embed,
            encoder,
            decoder,
            v_proj,
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embed, &self.pos_embed];
        for layer in &self.encoder {
            out.extend(layer.params());
        }
        for layer in &self.decoder {
            out.extend(layer.params());
        }
        out.push(&self.v_proj);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(EDCK1_MAGIC)?;
        for v in [
            self.config.vocab_size,
            self.config.d_model,
            self.config.head_count,
            self.config.encoder_layers,
            self.config.decoder_layers,
            self.config.ffw_width,
            self.config.max_positions,
        ] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        let schema = encdec_schema(&self.config);
        write_blobs(w, &schema, &self.params(), "EDCK1")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, EDCK1_MAGIC, "EDCK1")?;
        let mut field = || -> Result<usize> { Ok(r.read_u32::<LittleEndian>()? as usize) };
        let config = EncDecConfig {
            vocab_size: field()?,
            d_model: field()?,
            head_count: field()?,
            encoder_layers: field()?,
            decoder_layers: field()?,
            ffw_width: field()?,
            max_positions: field()?,
        };
        let schema = encdec_schema(&config);
        let tensors = read_blobs(r, &schema, "EDCK1")?;
        let mut it = tensors.into_iter();
        let token_embed = it.next().expect("schema");
        let pos_embed = it.next().expect("schema");
        let encoder = (0..config.encoder_layers)
            .map(|_| take_encoder_layer(&mut it, config.head_count, config.d_model))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| take_interaction_layer(&mut it, config.head_count, config.d_model))
            .collect();
        let v_proj = it.next().expect("schema");
        Ok(EncDecCheckpoint {
            config,
            token_embed,
            pos_embed,
            encoder,
            decoder,
            v_proj,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// Build a re-ranker from a reference encoder-decoder checkpoint.
///
/// Checkpoint dimensions must match `config` exactly (the decoder depth
/// becomes the interaction depth); the donor position table may be larger
/// than needed and is truncated to the rows the re-ranker can address.
pub fn import_encdec_weights(ckpt: &EncDecCheckpoint, config: &ModelConfig) -> Result<MoresModel> {
    config.validate().map_err(|e| Error::Import(e.to_string()))?;
    let c = &ckpt.config;
    let mismatch = |field: &str, got: usize, want: usize| {
        Error::Import(format!("{field}: checkpoint has {got}, model config needs {want}"))
    };
    if c.vocab_size != config.vocab_size {
        return Err(mismatch("vocab_size", c.vocab_size, config.vocab_size));
    }
    if c.d_model != config.d_model {
        return Err(mismatch("d_model", c.d_model, config.d_model));
    }
    if c.head_count != config.head_count {
        return Err(mismatch("head_count", c.head_count, config.head_count));
    }
    if c.encoder_layers != config.encoder_layers {
        return Err(mismatch("encoder_layers", c.encoder_layers, config.encoder_layers));
    }
    if c.decoder_layers != config.interaction_layers {
        return Err(mismatch(
            "decoder_layers (interaction stack)",
            c.decoder_layers,
            config.interaction_layers,
        ));
    }
    if c.ffw_width != config.ffw_width {
        return Err(mismatch("ffw_width", c.ffw_width, config.ffw_width));
    }
    if c.max_positions < config.max_positions() {
        return Err(mismatch("max_positions", c.max_positions, config.max_positions()));
    }

    let d = config.d_model;
    let rows = config.max_positions();
    let pos_data = ckpt.pos_embed.data()[..rows * d].to_vec();
    let mark = |t: &Tensor| t.clone().with_requires_grad(true);

    Ok(MoresModel {
        config: config.clone(),
        token_embed: mark(&ckpt.token_embed),
        pos_embed: Tensor::matrix(rows, d, pos_data)?.with_requires_grad(true),
        encoder: ckpt
            .encoder
            .iter()
            .map(|l| mark_encoder_layer(l, &mark))
            .collect(),
        interaction: ckpt
            .decoder
            .iter()
            .map(|l| mark_interaction_layer(l, &mark))
            .collect(),
        scoring: ScoringHead {
            v_proj: mark(&ckpt.v_proj),
        },
    })
}

impl MoresModel {
    /// Serialize to the `MRSM1` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MRSM1_MAGIC)?;
        for v in [
            self.config.vocab_size,
            self.config.d_model,
            self.config.head_count,
            self.config.encoder_layers,
            self.config.interaction_layers,
            self.config.ffw_width,
            self.config.chunk_size,
            self.config.max_chunks,
            self.config.max_query_len,
        ] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        let schema = mores_schema(&self.config, &self.param_names());
        write_blobs(w, &schema, &self.params(), "MRSM1")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, MRSM1_MAGIC, "MRSM1")?;
        let mut field = || -> Result<usize> { Ok(r.read_u32::<LittleEndian>()? as usize) };
        let config = ModelConfig {
            vocab_size: field()?,
            d_model: field()?,
            head_count: field()?,
            encoder_layers: field()?,
            interaction_layers: field()?,
            ffw_width: field()?,
            chunk_size: field()?,
            max_chunks: field()?,
            max_query_len: field()?,
        };
        config
            .validate()
            .map_err(|e| Error::Malformed { container: "MRSM1", msg: e.to_string() })?;
        // Names depend only on layer counts; borrow them from a schema built
        // off the config by constructing the name list directly.
        let names = mores_param_names(&config);
        let schema = mores_schema(&config, &names);
        let tensors = read_blobs(r, &schema, "MRSM1")?;
        let mut it = tensors.into_iter().map(|t| t.with_requires_grad(true));
        let token_embed = it.next().expect("schema");
        let pos_embed = it.next().expect("schema");
        let encoder: Vec<EncoderLayerWeights> = (0..config.encoder_layers)
            .map(|_| take_encoder_layer(&mut it, config.head_count, config.d_model))
            .collect();
        let interaction: Vec<InteractionLayerWeights> = (0..config.interaction_layers)
            .map(|_| take_interaction_layer(&mut it, config.head_count, config.d_model))
            .collect();
        let v_proj = it.next().expect("schema");
        Ok(MoresModel {
            config,
            token_embed,
            pos_embed,
            encoder,
            interaction,
            scoring: ScoringHead { v_proj },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// SHA-256 of the serialized model (config and all weights); caches are
    /// stamped with this to prevent silent model/cache mismatches.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

fn attn_names(prefix: &str) -> Vec<String> {
    ["wq", "wk", "wv", "wo"].iter().map(|w| format!("{prefix}.{w}")).collect()
}

fn ln_names(prefix: &str) -> Vec<String> {
    vec![format!("{prefix}.gain"), format!("{prefix}.bias")]
}

/// Blob names for `MRSM1`, identical to [`MoresModel::param_names`] but
/// computable from a config alone.
fn mores_param_names(config: &ModelConfig) -> Vec<String> {
    let mut out = vec!["token_embed".to_string(), "pos_embed".to_string()];
    for i in 0..config.encoder_layers {
        let p = format!("encoder.{i}");
        out.extend(attn_names(&format!("{p}.self_attn")));
        out.push(format!("{p}.ffw.w1"));
        out.push(format!("{p}.ffw.w2"));
        out.extend(ln_names(&format!("{p}.ln_attn")));
        out.extend(ln_names(&format!("{p}.ln_ffw")));
    }
    for i in 0..config.interaction_layers {
        let p = format!("interaction.{i}");
        out.extend(attn_names(&format!("{p}.self_attn")));
        out.extend(attn_names(&format!("{p}.cross_attn")));
        out.push(format!("{p}.ffw.w1"));
        out.push(format!("{p}.ffw.w2"));
        out.extend(ln_names(&format!("{p}.ln_self")));
        out.extend(ln_names(&format!("{p}.ln_cross")));
        out.extend(ln_names(&format!("{p}.ln_ffw")));
    }
    out.push("scoring.v_proj".to_string());
    out
}

fn encoder_layer_shapes(d: usize, ffw: usize) -> Vec<(usize, usize)> {
    vec![
        (d, d), (d, d), (d, d), (d, d), // self attention
        (d, ffw), (ffw, d),             // feed-forward
        (1, d), (1, d),                 // ln_attn
        (1, d), (1, d),                 // ln_ffw
    ]
}

fn interaction_layer_shapes(d: usize, ffw: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(d, d); 8]; // self + cross attention
    out.push((d, ffw));
    out.push((ffw, d));
    out.extend([(1, d); 6]); // three layer norms
    out
}

fn mores_schema(config: &ModelConfig, names: &[String]) -> Vec<(String, usize, usize)> {
    let d = config.d_model;
    let mut shapes = vec![(config.embed_rows(), d), (config.max_positions(), d)];
    for _ in 0..config.encoder_layers {
        shapes.extend(encoder_layer_shapes(d, config.ffw_width));
    }
    for _ in 0..config.interaction_layers {
        shapes.extend(interaction_layer_shapes(d, config.ffw_width));
    }
    shapes.push((d, 1));
    debug_assert_eq!(shapes.len(), names.len());
    names
        .iter()
        .cloned()
        .zip(shapes)
        .map(|(n, (r, c))| (n, r, c))
        .collect()
}

fn encdec_schema(config: &EncDecConfig) -> Vec<(String, usize, usize)> {
    let d = config.d_model;
    let mut names = vec!["token_embed".to_string(), "pos_embed".to_string()];
    let mut shapes = vec![(config.vocab_size + 2, d), (config.max_positions, d)];
    for i in 0..config.encoder_layers {
        let p = format!("encoder.{i}");
        names.extend(attn_names(&format!("{p}.self_attn")));
        names.push(format!("{p}.ffw.w1"));
        names.push(format!("{p}.ffw.w2"));
        names.extend(ln_names(&format!("{p}.ln_attn")));
        names.extend(ln_names(&format!("{p}.ln_ffw")));
        shapes.extend(encoder_layer_shapes(d, config.ffw_width));
    }
    for i in 0..config.decoder_layers {
        let p = format!("decoder.{i}");
        names.extend(attn_names(&format!("{p}.self_attn")));
        names.extend(attn_names(&format!("{p}.cross_attn")));
        names.push(format!("{p}.ffw.w1"));
        names.push(format!("{p}.ffw.w2"));
        names.extend(ln_names(&format!("{p}.ln_self")));
        names.extend(ln_names(&format!("{p}.ln_cross")));
        names.extend(ln_names(&format!("{p}.ln_ffw")));
        shapes.extend(interaction_layer_shapes(d, config.ffw_width));
    }
    names.push("v_proj".to_string());
    shapes.push((d, 1));
    names
        .into_iter()
        .zip(shapes)
        .map(|(n, (r, c))| (n, r, c))
        .collect()
}

fn write_blobs<W: Write>(
    w: &mut W,
    schema: &[(String, usize, usize)],
    params: &[&Tensor],
    container: &'static str,
) -> Result<()> {
    debug_assert_eq!(schema.len(), params.len());
    for ((name, rows, cols), tensor) in schema.iter().zip(params) {
        let (r, c) = tensor.dims2()?;
        if (r, c) != (*rows, *cols) {
            return Err(Error::Malformed {
                container,
                msg: format!("blob {name} has shape [{r}, {c}], expected [{rows}, {cols}]"),
            });
        }
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(r as u32)?;
        w.write_u32::<LittleEndian>(c as u32)?;
        for v in tensor.data() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_blobs<R: Read>(
    r: &mut R,
    schema: &[(String, usize, usize)],
    container: &'static str,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(schema.len());
    for (name, rows, cols) in schema {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        if name_len > 4096 {
            return Err(Error::Malformed {
                container,
                msg: format!("blob name length {name_len} is implausible"),
            });
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let got_name = String::from_utf8(name_buf).map_err(|_| Error::Malformed {
            container,
            msg: "blob name is not UTF-8".into(),
        })?;
        if &got_name != name {
            return Err(Error::Malformed {
                container,
                msg: format!("expected blob {name}, found {got_name}"),
            });
        }
        let got_rows = r.read_u32::<LittleEndian>()? as usize;
        let got_cols = r.read_u32::<LittleEndian>()? as usize;
        if (got_rows, got_cols) != (*rows, *cols) {
            return Err(Error::Malformed {
                container,
                msg: format!(
                    "blob {name} has shape [{got_rows}, {got_cols}], expected [{rows}, {cols}]"
                ),
            });
        }
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        out.push(Tensor::matrix(*rows, *cols, data)?);
    }
    Ok(out)
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 5], container: &'static str) -> Result<()> {
    let mut buf = [0u8; 5];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Malformed {
            container,
            msg: format!("bad magic {buf:?}"),
        });
    }
    Ok(())
}

fn take_attention(
    it: &mut impl Iterator<Item = Tensor>,
    head_count: usize,
    d_model: usize,
) -> AttentionWeights {
    AttentionWeights {
        wq: it.next().expect("schema"),
        wk: it.next().expect("schema"),
        wv: it.next().expect("schema"),
        wo: it.next().expect("schema"),
        head_count,
        head_dim: d_model / head_count,
    }
}

fn take_ffw(it: &mut impl Iterator<Item = Tensor>) -> FeedForwardWeights {
    FeedForwardWeights {
        w1: it.next().expect("schema"),
        w2: it.next().expect("schema"),
    }
}

fn take_ln(it: &mut impl Iterator<Item = Tensor>) -> LayerNormParams {
    LayerNormParams {
        gain: it.next().expect("schema"),
        bias: it.next().expect("schema"),
    }
}

fn take_encoder_layer(
    it: &mut impl Iterator<Item = Tensor>,
    head_count: usize,
    d_model: usize,
) -> EncoderLayerWeights {
    EncoderLayerWeights {
        self_attn: take_attention(it, head_count, d_model),
        ffw: take_ffw(it),
        ln_attn: take_ln(it),
        ln_ffw: take_ln(it),
    }
}

fn take_interaction_layer(
    it: &mut impl Iterator<Item = Tensor>,
    head_count: usize,
    d_model: usize,
) -> InteractionLayerWeights {
    InteractionLayerWeights {
        self_attn: take_attention(it, head_count, d_model),
        cross_attn: take_attention(it, head_count, d_model),
        ffw: take_ffw(it),
        ln_self: take_ln(it),
        ln_cross: take_ln(it),
        ln_ffw: take_ln(it),
    }
}

fn mark_encoder_layer(l: &EncoderLayerWeights, mark: &impl Fn(&Tensor) -> Tensor) -> EncoderLayerWeights {
    EncoderLayerWeights {
        self_attn: AttentionWeights {
            wq: mark(&l.self_attn.wq),
            wk: mark(&l.self_attn.wk),
            wv: mark(&l.self_attn.wv),
            wo: mark(&l.self_attn.wo),
            head_count: l.self_attn.head_count,
            head_dim: l.self_attn.head_dim,
        },
        ffw: FeedForwardWeights {
            w1: mark(&l.ffw.w1),
            w2: mark(&l.ffw.w2),
        },
        ln_attn: LayerNormParams {
            gain: mark(&l.ln_attn.gain),
            bias: mark(&l.ln_attn.bias),
        },
        ln_ffw: LayerNormParams {
            gain: mark(&l.ln_ffw.gain),
            bias: mark(&l.ln_ffw.bias),
        },
    }
}

fn mark_interaction_layer(
    l: &InteractionLayerWeights,
    mark: &impl Fn(&Tensor) -> Tensor,
) -> InteractionLayerWeights {
    InteractionLayerWeights {
        self_attn: AttentionWeights {
            wq: mark(&l.self_attn.wq),
            wk: mark(&l.self_attn.wk),
            wv: mark(&l.self_attn.wv),
            wo: mark(&l.self_attn.wo),
            head_count: l.self_attn.head_count,
            head_dim: l.self_attn.head_dim,
        },
        cross_attn: AttentionWeights {
            wq: mark(&l.cross_attn.wq),
            wk: mark(&l.cross_attn.wk),
            wv: mark(&l.cross_attn.wv),
            wo: mark(&l.cross_attn.wo),
            head_count: l.cross_attn.head_count,
            head_dim: l.cross_attn.head_dim,
        },
        ffw: FeedForwardWeights {
            w1: mark(&l.ffw.w1),
            w2: mark(&l.ffw.w2),
        },
        ln_self: LayerNormParams {
            gain: mark(&l.ln_self.gain),
            bias: mark(&l.ln_self.bias),
        },
        ln_cross: LayerNormParams {
            gain: mark(&l.ln_cross.gain),
            bias: mark(&l.ln_cross.bias),
        },
        ln_ffw: LayerNormParams {
            gain: mark(&l.ln_ffw.gain),
            bias: mark(&l.ln_ffw.bias),
        },
    }
}
