//! Self-describing binary container for backbones, channel masks and round
//! checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! file       := magic:[u8; 8] = "FEDLPS\0\x01"  kind:u8  body
//! kind       := 1 (backbone) | 2 (checkpoint) | 3 (mask)
//!
//! backbone   := shape  provenance:u8  layers  tree
//! checkpoint := round:u64  framework:str  predictor_first:u32  shape  layers
//!               task_count:u32 (task:u32 tree)*  mask_count:u32 mask*
//! mask       := client:u32 task:u32 ratio:f64 layer_count:u32
//!               (layer:u32 channels:u32 first_bit:u8 run_count:u32 run:u32*)*
//!
//! shape      := rank:u32 dim:u32*
//! layers     := count:u32 (tag:u8 p0:u32 p1:u32 p2:u32 p3:u32 p4:u32)*
//! tree       := count:u32 (layer:u32 role:u8 shape value:f64*)*
//! str        := len:u32 utf8-bytes
//! ```
//!
//! Layer tags: 0 conv2d (in, out, kernel, stride, padding), 1 linear (in,
//! out), 2 relu, 3 maxpool (kernel, stride), 4 avgpool (kernel, stride),
//! 5 flatten, 6 batchnorm (channels). Unused parameters are zero. Mask runs
//! alternate kept/pruned starting from `first_bit` (1 = kept).

use std::collections::BTreeMap;
use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{BackboneModel, Provenance, TaskId};
use crate::nn::{LayerSpec, LayerStack, ParamKey, ParameterTree, Role};
use crate::pruning::{expand_channels, ChannelMask, Owner};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"FEDLPS\0\x01";

const KIND_BACKBONE: u8 = 1;
const KIND_CHECKPOINT: u8 = 2;
const KIND_MASK: u8 = 3;

/// Channel bits of a mask, without the element expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub owner: Owner,
    pub ratio: f64,
    pub channels: BTreeMap<usize, Vec<bool>>,
}

impl MaskRecord {
    pub fn of(mask: &ChannelMask) -> Self {
        MaskRecord {
            owner: mask.owner,
            ratio: mask.ratio,
            channels: mask.channels.clone(),
        }
    }

    /// Re-expands to element granularity for the given predictor layout.
    pub fn expand(self, stack: &LayerStack, input_shape: &[usize]) -> Result<ChannelMask> {
        let elements = expand_channels(stack, input_shape, &self.channels)?;
        Ok(ChannelMask {
            owner: self.owner,
            ratio: self.ratio,
            channels: self.channels,
            elements,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub framework: String,
    pub predictor: LayerStack,
    pub input_shape: Vec<usize>,
    pub globals: BTreeMap<TaskId, ParameterTree>,
    pub masks: Vec<MaskRecord>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u8) -> Self {
        let mut buf = MAGIC.to_vec();
        buf.push(kind);
        Writer(buf)
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0
            .write_u32::<LE>(u32::try_from(v).expect("value fits in u32"))
            .unwrap();
    }

    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).unwrap();
    }

    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).unwrap();
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len());
        for &d in shape {
            self.u32(d);
        }
    }

    fn layers(&mut self, layers: &[LayerSpec]) {
        self.u32(layers.len());
        for layer in layers {
            let (tag, p) = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => (0, [in_channels, out_channels, kernel, stride, padding]),
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => (1, [in_features, out_features, 0, 0, 0]),
                LayerSpec::Relu => (2, [0; 5]),
                LayerSpec::MaxPool { kernel, stride } => (3, [kernel, stride, 0, 0, 0]),
                LayerSpec::AvgPool { kernel, stride } => (4, [kernel, stride, 0, 0, 0]),
                LayerSpec::Flatten => (5, [0; 5]),
                LayerSpec::BatchNorm { channels } => (6, [channels, 0, 0, 0, 0]),
            };
            self.u8(tag);
            for v in p {
                self.u32(v);
            }
        }
    }

    fn tree(&mut self, tree: &ParameterTree) {
        self.u32(tree.len());
        for (key, t) in tree.iter() {
            self.u32(key.layer);
            self.u8(match key.role {
                Role::Weight => 0,
                Role::Bias => 1,
            });
            self.shape(t.shape());
            for &v in t.data() {
                self.f64(v);
            }
        }
    }

    fn mask(&mut self, mask: &MaskRecord) {
        self.u32(mask.owner.client);
        self.u32(mask.owner.task);
        self.f64(mask.ratio);
        self.u32(mask.channels.len());
        for (&layer, bits) in &mask.channels {
            self.u32(layer);
            self.u32(bits.len());
            let runs = run_lengths(bits);
            self.u8(u8::from(bits.first().copied().unwrap_or(true)));
            self.u32(runs.len());
            for r in runs {
                self.u32(r);
            }
        }
    }
}

fn run_lengths(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut iter = bits.iter().peekable();
    while let Some(&b) = iter.next() {
        let mut n = 1;
        while iter.peek() == Some(&&b) {
            iter.next();
            n += 1;
        }
        runs.push(n);
    }
    runs
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], kind: u8) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
        };
        let mut magic = [0u8; 8];
        r.cur
            .read_exact(&mut magic)
            .map_err(|_| r.err("truncated magic"))?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a container file (bad magic)".into(),
            });
        }
        let found = r.u8()?;
        if found != kind {
            return Err(Error::Format {
                offset: 8,
                message: format!("expected container kind {kind}, found {found}"),
            });
        }
        Ok(r)
    }

    fn err(&self, message: &str) -> Error {
        Error::Format {
            offset: self.cur.position(),
            message: message.to_string(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur
            .read_u8()
            .map_err(|_| self.err("unexpected end of data"))
    }

    fn u32(&mut self) -> Result<usize> {
        self.cur
            .read_u32::<LE>()
            .map(|v| v as usize)
            .map_err(|_| self.err("unexpected end of data"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur
            .read_u64::<LE>()
            .map_err(|_| self.err("unexpected end of data"))
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur
            .read_f64::<LE>()
            .map_err(|_| self.err("unexpected end of data"))
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()?;
        if len > self.remaining() {
            return Err(self.err("string runs past end of data"));
        }
        let mut buf = vec![0u8; len];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| self.err("unexpected end of data"))?;
        String::from_utf8(buf).map_err(|_| self.err("string is not UTF-8"))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(self.err("implausible tensor rank"));
        }
        (0..rank).map(|_| self.u32()).collect()
    }

    fn layers(&mut self) -> Result<Vec<LayerSpec>> {
        let count = self.u32()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let tag = self.u8()?;
            let mut p = [0usize; 5];
            for v in &mut p {
                *v = self.u32()?;
            }
            layers.push(match tag {
                0 => LayerSpec::Conv2d {
                    in_channels: p[0],
                    out_channels: p[1],
                    kernel: p[2],
                    stride: p[3],
                    padding: p[4],
                },
                1 => LayerSpec::linear(p[0], p[1]),
                2 => LayerSpec::Relu,
                3 => LayerSpec::MaxPool {
                    kernel: p[0],
                    stride: p[1],
                },
                4 => LayerSpec::AvgPool {
                    kernel: p[0],
                    stride: p[1],
                },
                5 => LayerSpec::Flatten,
                6 => LayerSpec::BatchNorm { channels: p[0] },
                other => return Err(self.err(&format!("unknown layer tag {other}"))),
            });
        }
        Ok(layers)
    }

    fn tree(&mut self) -> Result<ParameterTree> {
        let count = self.u32()?;
        let mut tree = ParameterTree::new();
        for _ in 0..count {
            let layer = self.u32()?;
            let role = match self.u8()? {
                0 => Role::Weight,
                1 => Role::Bias,
                other => return Err(self.err(&format!("unknown parameter role {other}"))),
            };
            let shape = self.shape()?;
            let len: usize = shape.iter().product();
            if len * 8 > self.remaining() {
                return Err(self.err("tensor data runs past end of data"));
            }
            let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data).map_err(|e| self.err(&e.to_string()))?;
            tree.insert(ParamKey::new(layer, role), tensor);
        }
        Ok(tree)
    }

    fn mask(&mut self) -> Result<MaskRecord> {
        let client = self.u32()?;
        let task = self.u32()?;
        let ratio = self.f64()?;
        let layers = self.u32()?;
        let mut channels = BTreeMap::new();
        for _ in 0..layers {
            let layer = self.u32()?;
            let total = self.u32()?;
            let mut bit = self.u8()? != 0;
            let runs = self.u32()?;
            let mut bits = Vec::with_capacity(total.min(1 << 20));
            for _ in 0..runs {
                let n = self.u32()?;
                if bits.len() + n > total {
                    return Err(self.err("mask runs exceed channel count"));
                }
                bits.extend(std::iter::repeat_n(bit, n));
                bit = !bit;
            }
            if bits.len() != total {
                return Err(self.err("mask runs do not cover every channel"));
            }
            channels.insert(layer, bits);
        }
        Ok(MaskRecord {
            owner: Owner { client, task },
            ratio,
            channels,
        })
    }

    fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err("trailing bytes after container body"));
        }
        Ok(())
    }
}

pub fn encode_backbone(model: &BackboneModel) -> Vec<u8> {
    let mut w = Writer::new(KIND_BACKBONE);
    w.shape(&model.input_shape);
    w.u8(match model.provenance {
        Provenance::Pretrained => 1,
        Provenance::Fresh => 0,
    });
    w.layers(&model.stack.layers);
    w.tree(&model.weights);
    w.0
}

pub fn decode_backbone(bytes: &[u8]) -> Result<BackboneModel> {
    let mut r = Reader::open(bytes, KIND_BACKBONE)?;
    let input_shape = r.shape()?;
    let provenance = match r.u8()? {
        0 => Provenance::Fresh,
        1 => Provenance::Pretrained,
        other => return Err(r.err(&format!("unknown provenance {other}"))),
    };
    let layers = r.layers()?;
    let weights = r.tree()?;
    r.finish()?;
    BackboneModel::new(layers, input_shape, weights, provenance)
}

pub fn encode_mask(mask: &ChannelMask) -> Vec<u8> {
    let mut w = Writer::new(KIND_MASK);
    w.mask(&MaskRecord::of(mask));
    w.0
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskRecord> {
    let mut r = Reader::open(bytes, KIND_MASK)?;
    let m = r.mask()?;
    r.finish()?;
    Ok(m)
}

pub fn encode_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(KIND_CHECKPOINT);
    w.u64(cp.round as u64);
    w.str(&cp.framework);
    w.u32(cp.predictor.first);
    w.shape(&cp.input_shape);
    w.layers(&cp.predictor.layers);
    w.u32(cp.globals.len());
    for (&task, tree) in &cp.globals {
        w.u32(task);
        w.tree(tree);
    }
    w.u32(cp.masks.len());
    for m in &cp.masks {
        w.mask(m);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, KIND_CHECKPOINT)?;
    let round = r.u64()? as usize;
    let framework = r.str()?;
    let first = r.u32()?;
    let input_shape = r.shape()?;
    let layers = r.layers()?;
    let predictor = LayerStack::new(first, layers);
    let tasks = r.u32()?;
    let mut globals = BTreeMap::new();
    for _ in 0..tasks {
        let task = r.u32()?;
        let tree = r.tree()?;
        predictor.check_params(&tree)?;
        globals.insert(task, tree);
    }
    let count = r.u32()?;
    let masks = (0..count).map(|_| r.mask()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Checkpoint {
        round,
        framework,
        predictor,
        input_shape,
        globals,
        masks,
    })
}
