//! Trainable scoring network.
//!
//! Words are embedded (word + POS), contextualized by one bidirectional GRU
//! layer, projected per scoring role and scored with biaffine (edges,
//! labels) and trilinear (siblings, grandparents) forms. Everything is
//! recorded on a [`Tape`] so gradients reach every parameter.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array2, Array3, ArrayD, Axis, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::conllu::Sentence;
use crate::decoder::Formulation;
use crate::error::{Error, Result};
use crate::scores::{edge_mask, label_mask, triple_mask, ScoreTensors};
use crate::tape::{view2, CustomOp, Grads, Tape, Tensor, Var};

pub const ROOT: usize = 0;
pub const UNK: usize = 1;
const ROOT_SYMBOL: &str = "<root>";
const UNK_SYMBOL: &str = "<unk>";

/// Stddev of the biaffine edge and label tensors at initialization.
pub const UNARY_INIT_STD: f64 = 1.0;
/// Stddev of the trilinear sibling and grandparent tensors at initialization.
pub const BINARY_INIT_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub word: usize,
    pub pos: usize,
    /// GRU state size per direction.
    pub hidden: usize,
    pub edge: usize,
    pub label: usize,
    pub binary: usize,
}

impl ModelDims {
    /// Full-size embedding and scorer dimensions,
    /// with the recurrent layer at 100 units per direction.
    pub fn full(formulation: Formulation) -> Self {
        ModelDims {
            word: 100,
            pos: 50,
            hidden: 100,
            edge: match formulation {
                Formulation::Local => 450,
                Formulation::Single => 550,
            },
            label: 150,
            binary: 150,
        }
    }

    /// Every size of [`ModelDims::full`] divided by five; small enough to
    /// train in seconds on a CPU.
    pub fn desk(formulation: Formulation) -> Self {
        let t = Self::full(formulation);
        ModelDims {
            word: t.word / 5,
            pos: t.pos / 5,
            hidden: t.hidden / 5,
            edge: t.edge / 5,
            label: t.label / 5,
            binary: t.binary / 5,
        }
    }

    pub fn uniform(d: usize) -> Self {
        ModelDims {
            word: d,
            pos: d,
            hidden: d,
            edge: d,
            label: d,
            binary: d,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.word, self.pos, self.hidden, self.edge, self.label, self.binary];
        if all.contains(&0) {
            return Err(Error::Invalid(format!("all dimensions must be positive: {:?}", self)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Inverted-dropout probabilities. All zero disables dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    pub embedding: f64,
    pub encoder: f64,
    pub recurrent: f64,
    pub edge: f64,
    pub label: f64,
    pub binary: f64,
}

impl DropoutConfig {
    pub fn off() -> Self {
        DropoutConfig {
            embedding: 0.0,
            encoder: 0.0,
            recurrent: 0.0,
            edge: 0.0,
            label: 0.0,
            binary: 0.0,
        }
    }

    /// Word/POS 20%, recurrent layer 45% (input) / 25% (state),
    /// unary arc 25%, label 33%, binary arc 25%.
    pub fn standard() -> Self {
        DropoutConfig {
            embedding: 0.20,
            encoder: 0.45,
            recurrent: 0.25,
            edge: 0.25,
            label: 0.33,
            binary: 0.25,
        }
    }

    pub fn is_off(&self) -> bool {
        *self == Self::off()
    }
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self::off()
    }
}

/// Word, POS and label inventories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub words: Vec<String>,
    pub tags: Vec<String>,
    pub labels: Vec<String>,
    word_index: HashMap<String, usize>,
    tag_index: HashMap<String, usize>,
    label_index: HashMap<String, usize>,
}

fn index_of(items: &[String]) -> HashMap<String, usize> {
    items.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect()
}

impl Vocab {
    pub fn new(words: Vec<String>, tags: Vec<String>, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("label inventory is empty".into()));
        }
        if words.len() < 2 || tags.len() < 2 {
            return Err(Error::Invalid("vocabularies need root and unknown entries".into()));
        }
        Ok(Vocab {
            word_index: index_of(&words),
            tag_index: index_of(&tags),
            label_index: index_of(&labels),
            words,
            tags,
            labels,
        })
    }

    /// Collects every form, UPOS tag and label of the corpus in sorted order.
    pub fn from_corpus(corpus: &[Sentence]) -> Result<Self> {
        let mut words = BTreeSet::new();
        let mut tags = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for t in corpus.iter().flat_map(|s| &s.tokens) {
            words.insert(t.form.clone());
            tags.insert(t.upos.clone());
            labels.insert(t.gold_label.clone());
        }
        let with_specials = |set: BTreeSet<String>| {
            let mut v = vec![ROOT_SYMBOL.to_owned(), UNK_SYMBOL.to_owned()];
            v.extend(set.into_iter().filter(|w| w != ROOT_SYMBOL && w != UNK_SYMBOL));
            v
        };
        Vocab::new(
            with_specials(words),
            with_specials(tags),
            labels.into_iter().collect(),
        )
    }

    pub fn word_id(&self, form: &str) -> usize {
        self.word_index.get(form).copied().unwrap_or(UNK)
    }

    pub fn tag_id(&self, tag: &str) -> usize {
        self.tag_index.get(tag).copied().unwrap_or(UNK)
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.label_index.get(label).copied()
    }

    pub fn encode(&self, sentence: &Sentence) -> EncodedSentence {
        let mut words = vec![ROOT];
        let mut tags = vec![ROOT];
        for t in &sentence.tokens {
            words.push(self.word_id(&t.form));
            tags.push(self.tag_id(&t.upos));
        }
        EncodedSentence { words, tags }
    }
}

/// Vocabulary ids with the root at position 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub words: Vec<usize>,
    pub tags: Vec<usize>,
}

impl EncodedSentence {
    pub fn n(&self) -> usize {
        self.words.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wn: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub un: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bn: ParamId,
}

/// Where each tensor lives in [`ModelParams::tensors`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub word_embedding: ParamId,
    pub pos_embedding: ParamId,
    pub forward: GruParams,
    pub backward: GruParams,
    pub edge_head: Linear,
    pub edge_dep: Linear,
    pub label_head: Linear,
    pub label_dep: Linear,
    pub sib_head: Linear,
    pub sib_dep: Linear,
    pub gp_head: Linear,
    pub gp_mid: Linear,
    pub gp_dep: Linear,
    pub edge_biaffine: ParamId,
    pub label_biaffine: ParamId,
    pub sib_trilinear: ParamId,
    pub gp_trilinear: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Projection,
    Unary,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Normal(f64),
    Glorot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub formulation: Formulation,
    pub iterations: usize,
    pub activation: Activation,
}

struct Registry {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: &str, shape: &[usize], group: ParamGroup, init: Init) -> ParamId {
        self.tensors.push(ArrayD::zeros(IxDyn(shape)));
        self.names.push(name.to_owned());
        self.groups.push(group);
        self.inits.push(init);
        ParamId(self.tensors.len() - 1)
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        let group = ParamGroup::Projection;
        Linear {
            w: self.add(&format!("{}.w", name), &[input, output], group, Init::Glorot),
            b: self.add(&format!("{}.b", name), &[output], group, Init::Zeros),
        }
    }

    fn gru(&mut self, name: &str, input: usize, hidden: usize) -> GruParams {
        let group = ParamGroup::Encoder;
        let mut w = |gate: &str| self.add(&format!("{}.w{}", name, gate), &[input, hidden], group, Init::Glorot);
        let (wz, wr, wn) = (w("z"), w("r"), w("n"));
        let mut u = |gate: &str| self.add(&format!("{}.u{}", name, gate), &[hidden, hidden], group, Init::Glorot);
        let (uz, ur, un) = (u("z"), u("r"), u("n"));
        let mut b = |gate: &str| self.add(&format!("{}.b{}", name, gate), &[hidden], group, Init::Zeros);
        let (bz, br, bn) = (b("z"), b("r"), b("n"));
        GruParams { wz, wr, wn, uz, ur, un, bz, br, bn }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub layout: Layout,
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
    pub groups: Vec<ParamGroup>,
    inits: Vec<Init>,
}

fn fill<R: Rng>(tensor: &mut Tensor, init: Init, rng: &mut R) {
    match init {
        Init::Zeros => tensor.fill(0.0),
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("valid stddev");
            tensor.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Init::Glorot => {
            let shape = tensor.shape();
            let fan_in = shape[0];
            let fan_out = shape[1..].iter().product::<usize>();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            tensor.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
    }
}

impl ModelParams {
    /// Allocates and initializes all parameters.
    ///
    /// Every tensor draws from its own ChaCha stream keyed by `seed` and its
    /// position, so the same seed yields the same tensors whatever the
    /// decoder variant.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config, vocab)?;
        for (idx, tensor) in params.tensors.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            fill(tensor, params.inits[idx], &mut rng);
        }
        Ok(params)
    }

    /// All-zero parameters with the final layout.
    pub fn zeros(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.dims.validate()?;
        if config.iterations > crate::decoder::MAX_ITERATIONS {
            return Err(Error::Invalid(format!(
                "iterations must be at most {}",
                crate::decoder::MAX_ITERATIONS
            )));
        }
        let d = config.dims;
        let mut reg = Registry {
            tensors: Vec::new(),
            names: Vec::new(),
            groups: Vec::new(),
            inits: Vec::new(),
        };
        let emb = ParamGroup::Embedding;
        let word_embedding = reg.add("word_embedding", &[vocab.words.len(), d.word], emb, Init::Normal(1.0));
        let pos_embedding = reg.add("pos_embedding", &[vocab.tags.len(), d.pos], emb, Init::Normal(1.0));
        let input = d.word + d.pos;
        let forward = reg.gru("gru_fwd", input, d.hidden);
        let backward = reg.gru("gru_bwd", input, d.hidden);
        let enc = 2 * d.hidden;
        let edge_head = reg.linear("edge_head", enc, d.edge);
        let edge_dep = reg.linear("edge_dep", enc, d.edge);
        let label_head = reg.linear("label_head", enc, d.label);
        let label_dep = reg.linear("label_dep", enc, d.label);
        let sib_head = reg.linear("sib_head", enc, d.binary);
        let sib_dep = reg.linear("sib_dep", enc, d.binary);
        let gp_head = reg.linear("gp_head", enc, d.binary);
        let gp_mid = reg.linear("gp_mid", enc, d.binary);
        let gp_dep = reg.linear("gp_dep", enc, d.binary);
        let unary = Init::Normal(UNARY_INIT_STD);
        let binary = Init::Normal(BINARY_INIT_STD);
        let edge_biaffine = reg.add("edge_biaffine", &[d.edge + 1, d.edge + 1], ParamGroup::Unary, unary);
        let label_biaffine = reg.add(
            "label_biaffine",
            &[vocab.labels.len(), d.label + 1, d.label + 1],
            ParamGroup::Unary,
            unary,
        );
        let cube = [d.binary, d.binary, d.binary];
        let sib_trilinear = reg.add("sib_trilinear", &cube, ParamGroup::Binary, binary);
        let gp_trilinear = reg.add("gp_trilinear", &cube, ParamGroup::Binary, binary);
        let layout = Layout {
            word_embedding,
            pos_embedding,
            forward,
            backward,
            edge_head,
            edge_dep,
            label_head,
            label_dep,
            sib_head,
            sib_dep,
            gp_head,
            gp_mid,
            gp_dep,
            edge_biaffine,
            label_biaffine,
            sib_trilinear,
            gp_trilinear,
        };
        Ok(ModelParams {
            config,
            vocab,
            layout,
            tensors: reg.tensors,
            names: reg.names,
            groups: reg.groups,
            inits: reg.inits,
        })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn num_labels(&self) -> usize {
        self.vocab.labels.len()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut it = flat.iter();
        for t in &mut self.tensors {
            t.iter_mut().for_each(|x| *x = *it.next().expect("length checked"));
        }
    }

    /// Overwrites word embedding rows from `word v1 .. vd` lines. Returns the
    /// number of vocabulary rows that were set.
    pub fn load_embeddings(&mut self, text: &str) -> Result<usize> {
        let dim = self.config.dims.word;
        let id = self.layout.word_embedding;
        let mut updated = 0;
        for (idx, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else {
                continue;
            };
            let values = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: format!("bad embedding value: {}", e),
                })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {} values, found {}", dim, values.len()),
                });
            }
            let row = self.vocab.word_id(word);
            if row == UNK && word != UNK_SYMBOL {
                continue;
            }
            let table = &mut self.tensors[id.0];
            for (c, v) in values.into_iter().enumerate() {
                table[[row, c]] = v;
            }
            updated += 1;
        }
        Ok(updated)
    }

    /// Score tensors for a sentence; binary parts are only computed when the
    /// configured decoder runs at least one iteration.
    pub fn scores(&self, sentence: &Sentence) -> ScoreTensors {
        let enc = self.vocab.encode(sentence);
        let mut session = Session::new(self);
        let vars = session.score(&enc, self.config.iterations > 0);
        session.score_tensors(&vars)
    }
}

/// Per-parameter adjoints, aligned with [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// True when every entry of every tensor in `group` is exactly zero.
    pub fn group_is_zero(&self, params: &ModelParams, group: ParamGroup) -> bool {
        self.tensors
            .iter()
            .zip(&params.groups)
            .filter(|(_, g)| **g == group)
            .all(|(t, _)| t.iter().all(|&x| x == 0.0))
    }
}

/// Tape variables of one scored sentence.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub hidden: Var,
    pub edge: Var,
    pub label: Var,
    pub sib: Option<Var>,
    pub gp: Option<Var>,
}

/// A tape bound to a parameter set.
pub struct Session<'p> {
    pub tape: Tape<'p>,
    params: &'p ModelParams,
    vars: Vec<Option<Var>>,
    dropout: DropoutConfig,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Session {
            tape: Tape::new(),
            params,
            vars: vec![None; params.tensors.len()],
            dropout: DropoutConfig::off(),
            rng: None,
        }
    }

    pub fn with_dropout(params: &'p ModelParams, dropout: DropoutConfig, seed: u64) -> Self {
        let mut s = Session::new(params);
        if !dropout.is_off() {
            s.dropout = dropout;
            s.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        s
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let params: &'p ModelParams = self.params;
        let v = self.tape.leaf_ref(&params.tensors[id.0]);
        self.vars[id.0] = Some(v);
        v
    }

    fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.tape.value(x).raw_dim();
        let mask = ArrayD::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.tape.leaf(mask);
        self.tape.mul(x, m)
    }

    /// `act(x W + b)`.
    pub fn linear(&mut self, lin: Linear, x: Var) -> Var {
        let w = self.param(lin.w);
        let b = self.param(lin.b);
        let xw = self.tape.matmul(x, w);
        let y = self.tape.add_row(xw, b);
        match self.params.config.activation {
            Activation::Identity => y,
            Activation::Tanh => self.tape.tanh(y),
        }
    }

    fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.tape.matmul(x, w);
        self.tape.add_row(xw, b)
    }

    fn gru(&mut self, gru: GruParams, x: Var, reverse: bool) -> Var {
        let m = view2(self.tape.value(x)).nrows();
        let hidden = self.params.config.dims.hidden;
        let xz = self.affine(x, gru.wz, gru.bz);
        let xr = self.affine(x, gru.wr, gru.br);
        let xn = self.affine(x, gru.wn, gru.bn);
        let uz = self.param(gru.uz);
        let ur = self.param(gru.ur);
        let un = self.param(gru.un);
        let state_mask = if self.rng.is_some() && self.dropout.recurrent > 0.0 {
            let ones = self.tape.leaf(ArrayD::ones(IxDyn(&[1, hidden])));
            Some(self.dropout(ones, self.dropout.recurrent))
        } else {
            None
        };

        let mut h = self.tape.leaf(ArrayD::zeros(IxDyn(&[1, hidden])));
        let mut rows = Vec::with_capacity(m);
        let order: Vec<usize> = if reverse {
            (0..m).rev().collect()
        } else {
            (0..m).collect()
        };
        for t in order {
            let hd = match state_mask {
                Some(mask) => self.tape.mul(h, mask),
                None => h,
            };
            let tape = &mut self.tape;
            let xz_t = tape.row(xz, t);
            let xr_t = tape.row(xr, t);
            let xn_t = tape.row(xn, t);
            let hz = tape.matmul(hd, uz);
            let hr = tape.matmul(hd, ur);
            let hn = tape.matmul(hd, un);
            let az = tape.add(xz_t, hz);
            let z = tape.sigmoid(az);
            let ar = tape.add(xr_t, hr);
            let r = tape.sigmoid(ar);
            let rhn = tape.mul(r, hn);
            let an = tape.add(xn_t, rhn);
            let cand = tape.tanh(an);
            let keep = tape.one_minus(z);
            let fresh = tape.mul(keep, cand);
            let carried = tape.mul(z, h);
            h = tape.add(fresh, carried);
            rows.push(h);
        }
        if reverse {
            rows.reverse();
        }
        self.tape.stack_rows(rows)
    }

    /// Contextual representations, `(n + 1) x 2 hidden`; row 0 is the root.
    pub fn encode(&mut self, sentence: &EncodedSentence) -> Var {
        let layout = self.params.layout;
        let we = self.param(layout.word_embedding);
        let pe = self.param(layout.pos_embedding);
        let words = self.tape.gather(we, sentence.words.clone());
        let tags = self.tape.gather(pe, sentence.tags.clone());
        let x = self.tape.concat_cols(words, tags);
        let x = self.dropout(x, self.dropout.embedding);
        let fwd = self.gru(layout.forward, x, false);
        let bwd = self.gru(layout.backward, x, true);
        let h = self.tape.concat_cols(fwd, bwd);
        self.dropout(h, self.dropout.encoder)
    }

    fn n_of(&self, h: Var) -> usize {
        view2(self.tape.value(h)).nrows() - 1
    }

    /// Biaffine edge scores `[h_i; 1]^T U [d_j; 1]`, masked.
    pub fn score_edges(&mut self, h: Var) -> Var {
        let n = self.n_of(h);
        let layout = self.params.layout;
        let head = self.linear(layout.edge_head, h);
        let head = self.dropout(head, self.dropout.edge);
        let dep = self.linear(layout.edge_dep, h);
        let dep = self.dropout(dep, self.dropout.edge);
        let u = self.param(layout.edge_biaffine);
        let tape = &mut self.tape;
        let ha = tape.append_ones(head);
        let da = tape.append_ones(dep);
        let hu = tape.matmul(ha, u);
        let dt = tape.transpose(da);
        let raw = tape.matmul(hu, dt);
        let mask = tape.leaf(edge_mask(n).into_dyn());
        tape.mul(raw, mask)
    }

    /// Biaffine label scores, `(n + 1) x (n + 1) x L`.
    pub fn score_labels(&mut self, h: Var) -> Var {
        let n = self.n_of(h);
        let layout = self.params.layout;
        let head = self.linear(layout.label_head, h);
        let head = self.dropout(head, self.dropout.label);
        let dep = self.linear(layout.label_dep, h);
        let dep = self.dropout(dep, self.dropout.label);
        let u = self.param(layout.label_biaffine);
        let ha = self.tape.append_ones(head);
        let da = self.tape.append_ones(dep);
        let out = label_biaffine_forward(self.tape.value(ha), self.tape.value(da), self.tape.value(u));
        let raw = self.tape.custom(vec![ha, da, u], out, Box::new(LabelBiaffineOp));
        let labels = self.params.num_labels();
        let mask = self.tape.leaf(label_mask(n, labels).into_dyn());
        self.tape.mul(raw, mask)
    }

    fn trilinear(&mut self, a: Var, b: Var, c: Var, w: ParamId) -> Var {
        let n = self.n_of(a);
        let w = self.param(w);
        let op = TrilinearOp::new(
            self.tape.value(a),
            self.tape.value(b),
            self.tape.value(c),
            self.tape.value(w),
        );
        let out = op.output(self.tape.value(c));
        let raw = self.tape.custom(vec![a, b, c, w], out, Box::new(op));
        let mask = self.tape.leaf(triple_mask(n).into_dyn());
        self.tape.mul(raw, mask)
    }

    /// Trilinear sibling scores over `(head, dependent, other dependent)`.
    pub fn score_siblings(&mut self, h: Var) -> Var {
        let layout = self.params.layout;
        let p = self.dropout.binary;
        let head = self.linear(layout.sib_head, h);
        let head = self.dropout(head, p);
        let dep = self.linear(layout.sib_dep, h);
        let dep = self.dropout(dep, p);
        self.trilinear(head, dep, dep, layout.sib_trilinear)
    }

    /// Trilinear grandparent scores over `(grandparent, head, dependent)`.
    pub fn score_grandparents(&mut self, h: Var) -> Var {
        let layout = self.params.layout;
        let p = self.dropout.binary;
        let head = self.linear(layout.gp_head, h);
        let head = self.dropout(head, p);
        let mid = self.linear(layout.gp_mid, h);
        let mid = self.dropout(mid, p);
        let dep = self.linear(layout.gp_dep, h);
        let dep = self.dropout(dep, p);
        self.trilinear(head, mid, dep, layout.gp_trilinear)
    }

    pub fn score(&mut self, sentence: &EncodedSentence, with_binary: bool) -> ScoreVars {
        let hidden = self.encode(sentence);
        let edge = self.score_edges(hidden);
        let label = self.score_labels(hidden);
        let (sib, gp) = if with_binary {
            (Some(self.score_siblings(hidden)), Some(self.score_grandparents(hidden)))
        } else {
            (None, None)
        };
        ScoreVars {
            hidden,
            edge,
            label,
            sib,
            gp,
        }
    }

    /// Copies score values off the tape; absent binary scores are zero.
    pub fn score_tensors(&self, vars: &ScoreVars) -> ScoreTensors {
        let edge = view2(self.tape.value(vars.edge)).to_owned();
        let n = edge.nrows() - 1;
        let cube = |v: Option<Var>| match v {
            Some(v) => as3(self.tape.value(v)),
            None => Array3::zeros((n + 1, n + 1, n + 1)),
        };
        ScoreTensors {
            edge,
            sib: cube(vars.sib),
            gp: cube(vars.gp),
            label: as3(self.tape.value(vars.label)),
        }
    }

    /// Collects parameter adjoints; unused parameters get zeros.
    pub fn param_grads(&self, grads: &Grads) -> Gradients {
        Gradients {
            tensors: self
                .params
                .tensors
                .iter()
                .zip(&self.vars)
                .map(|(t, v)| match v.and_then(|v| grads.get(v)) {
                    Some(g) => g.clone(),
                    None => ArrayD::zeros(t.raw_dim()),
                })
                .collect(),
        }
    }
}

fn as3(t: &Tensor) -> Array3<f64> {
    t.view().into_dimensionality::<Ix3>().expect("3-d tensor").to_owned()
}

fn label_biaffine_forward(ha: &Tensor, da: &Tensor, u: &Tensor) -> Tensor {
    let ha = view2(ha);
    let da = view2(da);
    let u = u.view().into_dimensionality::<Ix3>().expect("label tensor");
    let m = ha.nrows();
    let labels = u.dim().0;
    let mut out = Array3::zeros((m, m, labels));
    for l in 0..labels {
        let s = ha.dot(&u.index_axis(Axis(0), l)).dot(&da.t());
        out.slice_mut(s![.., .., l]).assign(&s);
    }
    out.into_dyn()
}

struct LabelBiaffineOp;

impl CustomOp for LabelBiaffineOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let ha = view2(inputs[0]);
        let da = view2(inputs[1]);
        let u = inputs[2].view().into_dimensionality::<Ix3>().expect("label tensor");
        let g = grad.view().into_dimensionality::<Ix3>().expect("label grad");
        let mut gha = Array2::zeros(ha.raw_dim());
        let mut gda = Array2::zeros(da.raw_dim());
        let mut gu = Array3::zeros(u.raw_dim());
        for l in 0..u.dim().0 {
            let gl = g.slice(s![.., .., l]);
            let ul = u.index_axis(Axis(0), l);
            gu.index_axis_mut(Axis(0), l).assign(&ha.t().dot(&gl).dot(&da));
            gha += &gl.dot(&da).dot(&ul.t());
            gda += &gl.t().dot(&ha).dot(&ul);
        }
        vec![gha.into_dyn(), gda.into_dyn(), gu.into_dyn()]
    }
}

/// `out[i, j, k] = sum_{abc} w[a, b, c] a[i, a] b[j, b] c[k, c]`, contracted
/// head first: `O(m d^3 + m^2 d^2 + m^3 d)`.
struct TrilinearOp {
    /// `t1[i] = sum_a a[i, a] w[a, ., .]`, stored as `m x (d2 d3)`.
    t1: Array2<f64>,
    /// `t2[(i, j)] = sum_b b[j, b] t1[i, b, .]`, stored as `m^2 x d3`.
    t2: Array2<f64>,
    dims: (usize, usize, usize, usize),
}

impl TrilinearOp {
    fn new(a: &Tensor, b: &Tensor, _c: &Tensor, w: &Tensor) -> Self {
        let a = view2(a);
        let b = view2(b);
        let (d1, d2, d3) = w.view().into_dimensionality::<Ix3>().expect("trilinear tensor").dim();
        let m = a.nrows();
        let w2 = w.to_shape((d1, d2 * d3)).expect("contiguous tensor");
        let w2 = w2.into_dimensionality::<ndarray::Ix2>().expect("matrix");
        let t1 = a.dot(&w2);
        let mut t2 = Array2::zeros((m * m, d3));
        for i in 0..m {
            let t1_i = t1.slice(s![i, ..]).to_owned().into_shape_with_order((d2, d3)).expect("row reshape");
            t2.slice_mut(s![i * m..(i + 1) * m, ..]).assign(&b.dot(&t1_i));
        }
        TrilinearOp {
            t1,
            t2,
            dims: (m, d1, d2, d3),
        }
    }

    fn output(&self, c: &Tensor) -> Tensor {
        let m = self.dims.0;
        let s = self.t2.dot(&view2(c).t());
        s.to_shape((m, m, m)).expect("cube").into_owned().into_dyn()
    }
}

impl CustomOp for TrilinearOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (m, d1, d2, d3) = self.dims;
        let a = view2(inputs[0]);
        let b = view2(inputs[1]);
        let c = view2(inputs[2]);
        let w2 = inputs[3]
            .to_shape((d1, d2 * d3))
            .expect("contiguous tensor")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matrix");
        let g = grad
            .to_shape((m * m, m))
            .expect("contiguous grad")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matrix");
        let g_t2 = g.dot(&c);
        let g_c = g.t().dot(&self.t2);
        let mut g_t1 = Array2::zeros((m, d2 * d3));
        let mut g_b = Array2::zeros((m, d2));
        for i in 0..m {
            let g_t2_i = g_t2.slice(s![i * m..(i + 1) * m, ..]);
            let t1_i = self.t1.slice(s![i, ..]).to_owned().into_shape_with_order((d2, d3)).expect("row reshape");
            let g_t1_i = b.t().dot(&g_t2_i);
            g_t1.row_mut(i)
                .assign(&g_t1_i.to_shape(d2 * d3).expect("flatten"));
            g_b += &g_t2_i.dot(&t1_i.t());
        }
        let g_w = a.t().dot(&g_t1);
        let g_a = g_t1.dot(&w2.t());
        vec![
            g_a.into_dyn(),
            g_b.into_dyn(),
            g_c.into_dyn(),
            g_w.to_shape((d1, d2, d3)).expect("cube").into_owned().into_dyn(),
        ]
    }
}

/// Softmax over the label axis.
pub fn label_distribution(label_scores: &Array3<f64>) -> Array3<f64> {
    let mut p = label_scores.clone();
    for mut lane in p.lanes_mut(Axis(2)) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|x| (x - max).exp());
        let total = lane.sum();
        lane.mapv_inplace(|x| x / total);
    }
    p
}
