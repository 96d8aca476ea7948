//! Conditioning encoder plus residual U-Net with time embedding and
//! self-attention at configured resolutions.

use flowct_tensor::{
    attention_block, AttentionNorm, AttentionWeights, DropoutKey, Scalar, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::VelocityNetConfig;
use crate::error::{Error, Result};

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Conv {
        let fan_in = cin * k * k * k;
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform { fan_in }
        };
        Conv {
            w: self.add(format!("{name}.weight"), vec![cout, cin, k, k, k], init),
            b: self.add(format!("{name}.bias"), vec![cout], init),
            stride,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        let init = Init::Uniform { fan_in: fin };
        Linear {
            w: self.add(format!("{name}.weight"), vec![fout, fin], init),
            b: self.add(format!("{name}.bias"), vec![fout], init),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![c], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    dropout_id: u64,
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
}

#[derive(Debug, Clone)]
enum Block {
    Res(ResBlock),
    Attn(Attention),
    Down(Conv),
    Up(Conv),
}

#[derive(Debug, Clone)]
struct Arch {
    enc1: Conv,
    enc2: Conv,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    /// Each entry produces one skip tensor.
    input_blocks: Vec<Vec<Block>>,
    middle: Vec<Block>,
    /// Each entry first concatenates one skip tensor.
    output_blocks: Vec<Vec<Block>>,
    out_norm: Norm,
    out_conv: Conv,
}

fn build(cfg: &VelocityNetConfig) -> (Arch, Vec<ParamSpec>) {
    let mut reg = Registry::default();
    let mut dropout_ids = 0u64;
    let mut res = |reg: &mut Registry, name: String, cin: usize, cout: usize| {
        dropout_ids += 1;
        Block::Res(ResBlock {
            norm1: reg.norm(&format!("{name}.norm1"), cin),
            conv1: reg.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            time: reg.linear(&format!("{name}.time"), cfg.time_embed_dim, cout),
            norm2: reg.norm(&format!("{name}.norm2"), cout),
            conv2: reg.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| reg.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
            dropout_id: dropout_ids,
        })
    };
    let attn = |reg: &mut Registry, name: String, c: usize| {
        Block::Attn(Attention {
            norm: reg.norm(&format!("{name}.norm"), c),
            q: reg.conv(&format!("{name}.q"), c, c, 1, 1, false),
            k: reg.conv(&format!("{name}.k"), c, c, 1, 1, false),
            v: reg.conv(&format!("{name}.v"), c, c, 1, 1, false),
            out: reg.conv(&format!("{name}.proj"), c, c, 1, 1, false),
        })
    };

    let enc1 = reg.conv("cond.conv1", 1, cfg.cond_channels, 3, 1, false);
    let enc2 = reg.conv(
        "cond.conv2",
        cfg.cond_channels,
        cfg.cond_channels,
        3,
        1,
        false,
    );
    let time1 = reg.linear("time.fc1", cfg.base_channels, cfg.time_embed_dim);
    let time2 = reg.linear("time.fc2", cfg.time_embed_dim, cfg.time_embed_dim);

    let levels = cfg.levels();
    let c0 = cfg.stage_channels(0);
    let conv_in = reg.conv("input", 1 + cfg.cond_channels, c0, 3, 1, false);
    let mut skip_channels = vec![c0];
    let mut ch = c0;
    let mut input_blocks = Vec::new();
    for stage in 0..=levels {
        let out = cfg.stage_channels(stage);
        for b in 0..cfg.blocks_per_level {
            let name = format!("down.{stage}.{b}");
            let mut blocks = vec![res(&mut reg, format!("{name}.res"), ch, out)];
            ch = out;
            if cfg.has_attention(stage) {
                blocks.push(attn(&mut reg, format!("{name}.attn"), ch));
            }
            input_blocks.push(blocks);
            skip_channels.push(ch);
        }
        if stage < levels {
            input_blocks.push(vec![Block::Down(reg.conv(
                &format!("down.{stage}.downsample"),
                ch,
                ch,
                3,
                2,
                false,
            ))]);
            skip_channels.push(ch);
        }
    }

    let mut middle = vec![res(&mut reg, "mid.res1".into(), ch, ch)];
    if cfg.has_attention(levels) {
        middle.push(attn(&mut reg, "mid.attn".into(), ch));
    }
    middle.push(res(&mut reg, "mid.res2".into(), ch, ch));

    let mut output_blocks = Vec::new();
    for stage in (0..=levels).rev() {
        let out = cfg.stage_channels(stage);
        for b in 0..=cfg.blocks_per_level {
            let name = format!("up.{stage}.{b}");
            let skip = skip_channels.pop().expect("one skip per output block");
            let mut blocks = vec![res(&mut reg, format!("{name}.res"), ch + skip, out)];
            ch = out;
            if cfg.has_attention(stage) {
                blocks.push(attn(&mut reg, format!("{name}.attn"), ch));
            }
            if stage > 0 && b == cfg.blocks_per_level {
                blocks.push(Block::Up(reg.conv(
                    &format!("up.{stage}.upsample"),
                    ch,
                    ch,
                    3,
                    1,
                    false,
                )));
            }
            output_blocks.push(blocks);
        }
    }
    let out_norm = reg.norm("out.norm", ch);
    let out_conv = reg.conv("out.conv", ch, 1, 3, 1, cfg.zero_init_output);
    let arch = Arch {
        enc1,
        enc2,
        time1,
        time2,
        conv_in,
        input_blocks,
        middle,
        output_blocks,
        out_norm,
        out_conv,
    };
    (arch, reg.specs)
}

/// Exact number of trainable scalars for `cfg`, without allocating them.
pub fn param_count(cfg: &VelocityNetConfig) -> usize {
    build(cfg)
        .1
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }
}

/// Training/evaluation switch plus the key material for dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self {
            training: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            training: true,
            seed,
            step,
        }
    }
}

/// The conditional velocity model `v(x_t, t | c)`.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    config: VelocityNetConfig,
    arch: Arch,
    specs: Vec<ParamSpec>,
}

impl VelocityNet {
    pub fn new(config: VelocityNetConfig) -> Result<Self> {
        config.validate()?;
        let (arch, specs) = build(&config);
        Ok(Self {
            config,
            arch,
            specs,
        })
    }

    pub fn config(&self) -> &VelocityNetConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .specs
            .iter()
            .map(|spec| match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                Init::Ones => Tensor::full(&spec.shape, T::one()),
                Init::Zeros => Tensor::zeros(&spec.shape),
            })
            .collect();
        Params {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }

    /// Fails when `params` does not carry this architecture's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in self
            .specs
            .iter()
            .zip(params.names.iter().zip(&params.tensors))
        {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match architecture entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    fn check_input<T: Scalar>(
        &self,
        tape: &Tape<T>,
        v: Var,
        channels: usize,
        what: &str,
    ) -> Result<()> {
        let s = tape.shape(v);
        let side = self.config.input_side;
        if s.len() != 5 || s[1] != channels || s[2..] != [side, side, side] {
            return Err(Error::Data(format!(
                "{what} has shape {s:?}, expected [N, {channels}, {side}, {side}, {side}]"
            )));
        }
        Ok(())
    }

    fn conv<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], c: Conv, x: Var) -> Result<Var> {
        Ok(tape.conv3d_bias(x, p[c.w], Some(p[c.b]), c.stride, c.pad)?)
    }

    fn norm_act<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        let h = tape.group_norm(x, p[n.gamma], p[n.beta], self.config.norm_groups, GN_EPS)?;
        Ok(tape.silu(h)?)
    }

    /// Two 3×3×3 conv + ReLU stages: `[N, 1, D, H, W] → [N, cond_channels, D, H, W]`.
    pub fn encode_condition<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        c: Var,
    ) -> Result<Var> {
        self.check_input(tape, c, 1, "condition")?;
        let h = self.conv(tape, p, self.arch.enc1, c)?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, p, self.arch.enc2, h)?;
        Ok(tape.relu(h)?)
    }

    fn time_embedding<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], t: &[f64]) -> Result<Var> {
        let dim = self.config.base_channels;
        let half = dim / 2;
        let emb = Tensor::from_fn(&[t.len(), dim], |i| {
            let (n, j) = (i / dim, i % dim);
            if j >= 2 * half {
                return T::zero();
            }
            let freq = (-(10_000f64).ln() * (j % half) as f64 / half as f64).exp();
            // t ∈ [0, 1] is spread over the usual 0..1000 timestep range
            let arg = 1000.0 * t[n] * freq;
            T::of(if j < half { arg.cos() } else { arg.sin() })
        });
        let e = tape.constant(emb);
        let h = tape.linear(e, p[self.arch.time1.w], Some(p[self.arch.time1.b]))?;
        let h = tape.silu(h)?;
        Ok(tape.linear(h, p[self.arch.time2.w], Some(p[self.arch.time2.b]))?)
    }

    fn res_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        b: &ResBlock,
        x: Var,
        temb_act: Var,
        mode: ForwardMode,
    ) -> Result<Var> {
        let h = self.norm_act(tape, p, b.norm1, x)?;
        let h = self.conv(tape, p, b.conv1, h)?;
        let bias = tape.linear(temb_act, p[b.time.w], Some(p[b.time.b]))?;
        let h = tape.channel_add(h, bias)?;
        let h = self.norm_act(tape, p, b.norm2, h)?;
        let key = DropoutKey {
            seed: mode.seed,
            op_id: b.dropout_id,
            step: mode.step,
        };
        let h = tape.dropout(h, self.config.dropout_p, key, mode.training)?;
        let h = self.conv(tape, p, b.conv2, h)?;
        let skip = match b.skip {
            Some(c) => self.conv(tape, p, c, x)?,
            None => x,
        };
        Ok(tape.add(skip, h)?)
    }

    fn run_blocks<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        blocks: &[Block],
        mut h: Var,
        temb_act: Var,
        mode: ForwardMode,
    ) -> Result<Var> {
        for block in blocks {
            h = match block {
                Block::Res(b) => self.res_block(tape, p, b, h, temb_act, mode)?,
                Block::Attn(a) => {
                    let w = AttentionWeights {
                        norm: Some(AttentionNorm {
                            gamma: p[a.norm.gamma],
                            beta: p[a.norm.beta],
                            groups: self.config.norm_groups,
                            eps: GN_EPS,
                        }),
                        query: (p[a.q.w], p[a.q.b]),
                        key: (p[a.k.w], p[a.k.b]),
                        value: (p[a.v.w], p[a.v.b]),
                        out: (p[a.out.w], p[a.out.b]),
                    };
                    attention_block(tape, h, &w, self.config.attention_heads)?
                }
                Block::Down(c) => self.conv(tape, p, *c, h)?,
                Block::Up(c) => {
                    let u = tape.nearest_upsample2x(h)?;
                    self.conv(tape, p, *c, u)?
                }
            };
        }
        Ok(h)
    }

    /// Velocity prediction `[N, 1, D, H, W]` for noisy volumes `x_t`, per-item
    /// times `t`, and encoded condition features.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x_t: Var,
        t: &[f64],
        cond_features: Var,
        mode: ForwardMode,
    ) -> Result<Var> {
        self.check_input(tape, x_t, 1, "x_t")?;
        self.check_input(
            tape,
            cond_features,
            self.config.cond_channels,
            "condition features",
        )?;
        let n = tape.shape(x_t)[0];
        if t.len() != n || tape.shape(cond_features)[0] != n {
            return Err(Error::Data(format!(
                "batch mismatch: x_t has {n} items, t has {}, features {}",
                t.len(),
                tape.shape(cond_features)[0]
            )));
        }
        if let Some(&bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain {
                what: "t",
                value: bad,
                domain: "[0, 1]",
            });
        }
        let temb = self.time_embedding(tape, p, t)?;
        let temb_act = tape.silu(temb)?;

        let input = tape.concat_channels(x_t, cond_features)?;
        let mut h = self.conv(tape, p, self.arch.conv_in, input)?;
        let mut skips = vec![h];
        for blocks in &self.arch.input_blocks {
            h = self.run_blocks(tape, p, blocks, h, temb_act, mode)?;
            skips.push(h);
        }
        h = self.run_blocks(tape, p, &self.arch.middle, h, temb_act, mode)?;
        for blocks in &self.arch.output_blocks {
            let skip = skips.pop().expect("skip stack matches output blocks");
            let joined = tape.concat_channels(h, skip)?;
            h = self.run_blocks(tape, p, blocks, joined, temb_act, mode)?;
        }
        let h = self.norm_act(tape, p, self.arch.out_norm, h)?;
        self.conv(tape, p, self.arch.out_conv, h)
    }

    /// Gradient-free evaluation against precomputed condition features.
    pub fn predict<T: Scalar>(
        &self,
        params: &Params<T>,
        x_t: &Tensor<T>,
        t: &[f64],
        cond_features: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let x = tape.constant(x_t.clone());
        let c = tape.constant(cond_features.clone());
        let v = self.forward(&mut tape, &p, x, t, c, ForwardMode::eval())?;
        Ok(tape.value(v).clone())
    }

    pub fn condition_features<T: Scalar>(
        &self,
        params: &Params<T>,
        c: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let cv = tape.constant(c.clone());
        let f = self.encode_condition(&mut tape, &p, cv)?;
        Ok(tape.value(f).clone())
    }
}
