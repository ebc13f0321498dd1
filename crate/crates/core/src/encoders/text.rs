//! Prompt bank and text tower.
//!
//! Prompts follow the template `a photo of a [X]…[X] person from [D]…[D] dataset .`
//! where `[X]` are identity tokens and `[D]` domain tokens. The domain-free
//! prompt drops the whole `from … dataset` clause: `a photo of a [X]…[X] person .`
//!
//! The tower is a causal two-block transformer; the feature of a prompt is the
//! output at its final token, normalized and projected to the shared space.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{init_linear, EncoderConfig, EncoderError, ParamGroup, ParamList, ParamListMut, TextPooling};
use crate::autodiff::{Mat, RowSource, Tape, Var};

/// Template vocabulary. Index 0 is padding.
pub const VOCAB: [&str; 8] = ["<pad>", "a", "photo", "of", "person", "from", "dataset", "."];

pub fn word_id(word: &str) -> usize {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .unwrap_or_else(|| panic!("{word:?} is not a template word"))
}

const PREFIX: [&str; 4] = ["a", "photo", "of", "a"];
const SHORT_SUFFIX: [&str; 2] = ["person", "."];
const DOMAIN_INFIX: [&str; 2] = ["person", "from"];
const DOMAIN_SUFFIX: [&str; 2] = ["dataset", "."];

/// One position of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSlot {
    Word(usize),
    /// Identity token `index` of class `pid`.
    Id { pid: usize, index: usize },
    /// Domain token `index` of domain class `domain`.
    Domain { domain: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    pub slots: Vec<TokenSlot>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn learnable_tokens(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| !matches!(s, TokenSlot::Word(_)))
            .count()
    }
}

/// Learnable identity and domain token tables plus the fixed template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// `(num_pids · M) × token_dim`; rows `pid·M .. pid·M + M` belong to `pid`.
    pub id_tokens: Mat,
    /// `(num_domains · N) × token_dim`.
    pub domain_tokens: Mat,
    num_pids: usize,
    num_domains: usize,
    id_per_pid: usize,
    domain_per_domain: usize,
    template: Vec<usize>,
}

impl PromptBank {
    pub fn init<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        num_pids: usize,
        num_domains: usize,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut table = |rows: usize| {
            Mat::from_shape_fn((rows, cfg.token_dim), |_| normal.sample(&mut *rng))
        };
        let id_tokens = table(num_pids * cfg.id_tokens);
        let domain_tokens = table(num_domains * cfg.domain_tokens);
        let template = PREFIX
            .iter()
            .chain(&DOMAIN_INFIX)
            .chain(&DOMAIN_SUFFIX)
            .map(|w| word_id(w))
            .collect();
        Self {
            id_tokens,
            domain_tokens,
            num_pids,
            num_domains,
            id_per_pid: cfg.id_tokens,
            domain_per_domain: cfg.domain_tokens,
            template,
        }
    }

    pub fn num_pids(&self) -> usize {
        self.num_pids
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn tokens_per_pid(&self) -> usize {
        self.id_per_pid
    }

    pub fn tokens_per_domain(&self) -> usize {
        self.domain_per_domain
    }

    /// Word ids of the full template, without learnable slots.
    pub fn template_token_ids(&self) -> &[usize] {
        &self.template
    }

    /// Builds the prompt of `pid`, with the domain clause when `domain` is given.
    pub fn build_prompt(
        &self,
        pid: usize,
        domain: Option<usize>,
    ) -> Result<PromptSequence, EncoderError> {
        if pid >= self.num_pids {
            return Err(EncoderError::OutOfRange {
                what: "pid",
                index: pid,
                limit: self.num_pids,
            });
        }
        let words = |ws: &[&str]| ws.iter().map(|w| TokenSlot::Word(word_id(w))).collect::<Vec<_>>();
        let mut slots = words(&PREFIX);
        slots.extend((0..self.id_per_pid).map(|index| TokenSlot::Id { pid, index }));
        match domain {
            None => slots.extend(words(&SHORT_SUFFIX)),
            Some(d) => {
                if d >= self.num_domains {
                    return Err(EncoderError::OutOfRange {
                        what: "domain",
                        index: d,
                        limit: self.num_domains,
                    });
                }
                slots.extend(words(&DOMAIN_INFIX));
                slots.extend((0..self.domain_per_domain).map(|index| TokenSlot::Domain {
                    domain: d,
                    index,
                }));
                slots.extend(words(&DOMAIN_SUFFIX));
            }
        }
        Ok(PromptSequence { slots })
    }

    pub fn params(&self) -> ParamList<'_> {
        vec![
            ("prompt.id_tokens", ParamGroup::IdTokens, &self.id_tokens),
            ("prompt.domain_tokens", ParamGroup::DomainTokens, &self.domain_tokens),
        ]
    }

    pub fn params_mut(&mut self) -> ParamListMut<'_> {
        vec![
            ("prompt.id_tokens", ParamGroup::IdTokens, &mut self.id_tokens),
            ("prompt.domain_tokens", ParamGroup::DomainTokens, &mut self.domain_tokens),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, id_trainable: bool, domain_trainable: bool) -> BankVars {
        BankVars {
            id_tokens: tape.leaf(self.id_tokens.clone(), id_trainable),
            domain_tokens: tape.leaf(self.domain_tokens.clone(), domain_trainable),
            id_per_pid: self.id_per_pid,
            domain_per_domain: self.domain_per_domain,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub id_tokens: Var,
    pub domain_tokens: Var,
    id_per_pid: usize,
    domain_per_domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBlock {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub mlp_w1: Mat,
    pub mlp_b1: Mat,
    pub mlp_w2: Mat,
    pub mlp_b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub token_embed: Mat,
    pub pos_embed: Mat,
    pub blocks: Vec<TextBlock>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
    pub proj: Mat,
    /// When set, the tower is bound as constants and never receives gradients.
    pub frozen: bool,
}

#[derive(Debug, Clone)]
struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

#[derive(Debug, Clone)]
pub struct TextVars {
    token_embed: Var,
    pos_embed: Var,
    blocks: Vec<BlockVars>,
    lnf_g: Var,
    lnf_b: Var,
    proj: Var,
    names: Vec<(String, Var)>,
}

impl TextVars {
    pub fn named(&self) -> &[(String, Var)] {
        &self.names
    }
}

/// Longest prompt the positional table supports.
pub const MAX_PROMPT_LEN: usize = 24;

impl TextEncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let dt = cfg.token_dim;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let gauss = |rows: usize, cols: usize, rng: &mut R| {
            Mat::from_shape_fn((rows, cols), |_| normal.sample(rng))
        };
        let token_embed = gauss(VOCAB.len(), dt, rng);
        let pos_embed = gauss(MAX_PROMPT_LEN, dt, rng);
        let hidden = dt * cfg.text_mlp_ratio;
        let blocks = (0..cfg.text_layers)
            .map(|_| TextBlock {
                ln1_g: Mat::ones((1, dt)),
                ln1_b: Mat::zeros((1, dt)),
                wq: init_linear(dt, dt, rng),
                wk: init_linear(dt, dt, rng),
                wv: init_linear(dt, dt, rng),
                wo: init_linear(dt, dt, rng),
                ln2_g: Mat::ones((1, dt)),
                ln2_b: Mat::zeros((1, dt)),
                mlp_w1: init_linear(dt, hidden, rng),
                mlp_b1: Mat::zeros((1, hidden)),
                mlp_w2: init_linear(hidden, dt, rng),
                mlp_b2: Mat::zeros((1, dt)),
            })
            .collect();
        Self {
            token_embed,
            pos_embed,
            blocks,
            lnf_g: Mat::ones((1, dt)),
            lnf_b: Mat::zeros((1, dt)),
            proj: init_linear(dt, cfg.embed_dim, rng),
            frozen: true,
        }
    }

    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("text.token_embed".into(), &self.token_embed),
            ("text.pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, m) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("mlp_w1", &b.mlp_w1),
                ("mlp_b1", &b.mlp_b1),
                ("mlp_w2", &b.mlp_w2),
                ("mlp_b2", &b.mlp_b2),
            ] {
                out.push((format!("text.block{i}.{n}"), m));
            }
        }
        out.push(("text.lnf_g".into(), &self.lnf_g));
        out.push(("text.lnf_b".into(), &self.lnf_b));
        out.push(("text.proj".into(), &self.proj));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_values(&self) -> Vec<&Mat> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    pub fn param_values_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.token_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.mlp_w1,
                &mut b.mlp_b1,
                &mut b.mlp_w2,
                &mut b.mlp_b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.proj]);
        out
    }

    /// Binds the tower; parameters are trainable only when `frozen` is false.
    pub fn bind(&self, tape: &mut Tape) -> TextVars {
        let trainable = !self.frozen;
        let names: Vec<(String, Var)> = self
            .named()
            .into_iter()
            .map(|(n, m)| (n, tape.leaf(m.clone(), trainable)))
            .collect();
        let v = |i: usize| names[i].1;
        let blocks = (0..self.blocks.len())
            .map(|b| {
                let o = 2 + 12 * b;
                BlockVars {
                    ln1_g: v(o),
                    ln1_b: v(o + 1),
                    wq: v(o + 2),
                    wk: v(o + 3),
                    wv: v(o + 4),
                    wo: v(o + 5),
                    ln2_g: v(o + 6),
                    ln2_b: v(o + 7),
                    mlp_w1: v(o + 8),
                    mlp_b1: v(o + 9),
                    mlp_w2: v(o + 10),
                    mlp_b2: v(o + 11),
                }
            })
            .collect();
        let tail = 2 + 12 * self.blocks.len();
        TextVars {
            token_embed: v(0),
            pos_embed: v(1),
            blocks,
            lnf_g: v(tail),
            lnf_b: v(tail + 1),
            proj: v(tail + 2),
            names,
        }
    }
}

/// Records the text tower for `prompts` on `tape`; returns `n × embed_dim`
/// unit-norm features.
pub fn forward(
    tape: &mut Tape,
    text: &TextVars,
    bank: &BankVars,
    cfg: &EncoderConfig,
    prompts: &[PromptSequence],
) -> Result<Var, EncoderError> {
    if prompts.is_empty() {
        return Err(EncoderError::EmptyPrompt);
    }
    if prompts.iter().any(PromptSequence::is_empty) {
        return Err(EncoderError::EmptyPrompt);
    }
    let len = prompts.iter().map(PromptSequence::len).max().expect("non-empty");
    if len > MAX_PROMPT_LEN {
        return Err(EncoderError::Shape(format!(
            "prompt of length {len} exceeds {MAX_PROMPT_LEN}"
        )));
    }
    let n = prompts.len();
    let mut rows = Vec::with_capacity(n * len);
    let mut pos_rows = Vec::with_capacity(n * len);
    for p in prompts {
        for t in 0..len {
            let src = match p.slots.get(t) {
                None => RowSource::Row { source: 0, row: 0 },
                Some(TokenSlot::Word(w)) => RowSource::Row { source: 0, row: *w },
                Some(TokenSlot::Id { pid, index }) => RowSource::Row {
                    source: 1,
                    row: pid * bank.id_per_pid + index,
                },
                Some(TokenSlot::Domain { domain, index }) => RowSource::Row {
                    source: 2,
                    row: domain * bank.domain_per_domain + index,
                },
            };
            rows.push(src);
            pos_rows.push(t);
        }
    }
    let tokens = tape.gather(&[text.token_embed, bank.id_tokens, bank.domain_tokens], rows);
    let pos = tape.gather_rows(text.pos_embed, &pos_rows);
    let mut x = tape.add(tokens, pos);
    let inv_sqrt = 1.0 / (cfg.token_dim as f64).sqrt();
    for b in &text.blocks {
        let a = tape.layer_norm(x);
        let a = tape.mul_row(a, b.ln1_g);
        let a = tape.add_row(a, b.ln1_b);
        let q = tape.matmul(a, b.wq);
        let k = tape.matmul(a, b.wk);
        let v = tape.matmul(a, b.wv);
        let mut heads = Vec::with_capacity(n);
        for s in 0..n {
            let qs = tape.slice_rows(q, s * len, len);
            let ks = tape.slice_rows(k, s * len, len);
            let vs = tape.slice_rows(v, s * len, len);
            let scores = tape.matmul_t(qs, ks);
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.causal_softmax(scores);
            heads.push(tape.matmul(attn, vs));
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_rows(&heads)
        };
        let o = tape.matmul(o, b.wo);
        x = tape.add(x, o);
        let a = tape.layer_norm(x);
        let a = tape.mul_row(a, b.ln2_g);
        let a = tape.add_row(a, b.ln2_b);
        let m = tape.matmul(a, b.mlp_w1);
        let m = tape.add_row(m, b.mlp_b1);
        let m = tape.gelu(m);
        let m = tape.matmul(m, b.mlp_w2);
        let m = tape.add_row(m, b.mlp_b2);
        x = tape.add(x, m);
    }
    let pooled = match cfg.text_pooling {
        TextPooling::LastToken => {
            let last: Vec<usize> = prompts
                .iter()
                .enumerate()
                .map(|(s, p)| s * len + p.len() - 1)
                .collect();
            tape.gather_rows(x, &last)
        }
        TextPooling::Mean => {
            let mut pool = Mat::zeros((n, n * len));
            for (s, p) in prompts.iter().enumerate() {
                let w = 1.0 / p.len() as f64;
                for t in 0..p.len() {
                    pool[[s, s * len + t]] = w;
                }
            }
            let pool = tape.constant(pool);
            tape.matmul(pool, x)
        }
    };
    let pooled = tape.layer_norm(pooled);
    let pooled = tape.mul_row(pooled, text.lnf_g);
    let pooled = tape.add_row(pooled, text.lnf_b);
    let f = tape.matmul(pooled, text.proj);
    Ok(tape.row_normalize(f))
}

/// Inference: unit-norm prompt features.
pub fn encode_prompts(
    params: &TextEncoderParams,
    bank: &PromptBank,
    cfg: &EncoderConfig,
    prompts: &[PromptSequence],
) -> Result<Mat, EncoderError> {
    let mut tape = Tape::new();
    let text = params.bind(&mut tape);
    let bank_vars = bank.bind(&mut tape, false, false);
    let out = forward(&mut tape, &text, &bank_vars, cfg, prompts)?;
    Ok(tape.value(out).clone())
}
