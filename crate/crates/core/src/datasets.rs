//! Seeded generators, oracles and validators for the HashHop and HashChain
//! benchmarks, plus their JSONL file format.
//!
//! HashHop: one shuffled chain `h0 => h1 => ... => hn`; the answer is the hash
//! `hops` steps after the start. HashChain: several chains fan out from a
//! common start; the answer is the terminal hash of the uniquely shortest one.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HASH_ALPHABET: &[u8; 36] = b"abcdefghijklmnopqrstuvwxyz0123456789";
pub const DEFAULT_HASH_LEN: usize = 5;
pub const DEFAULT_MAX_CHAIN_LENGTH: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hash(String);

impl Hash {
    pub fn parse(s: &str, len: usize) -> Option<Hash> {
        (s.len() == len && s.bytes().all(|b| HASH_ALPHABET.contains(&b)))
            .then(|| Hash(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn hash_space(len: usize) -> u128 {
    36u128.saturating_pow(len as u32)
}

/// Draws a hash uniformly from the strings not yet in `taken` and records it.
pub fn gen_hash<R: Rng>(rng: &mut R, taken: &mut HashSet<Hash>, len: usize) -> Result<Hash> {
    if len == 0 || hash_space(len) <= taken.len() as u128 {
        return Err(Error::HashExhausted(taken.len()));
    }
    loop {
        let s: String = (0..len)
            .map(|_| HASH_ALPHABET[rng.gen_range(0..HASH_ALPHABET.len())] as char)
            .collect();
        let h = Hash(s);
        if taken.insert(h.clone()) {
            return Ok(h);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub hash_len: usize,
    pub max_chain_length: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            hash_len: DEFAULT_HASH_LEN,
            max_chain_length: DEFAULT_MAX_CHAIN_LENGTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashHopSample {
    /// Chain links in presentation (shuffled) order.
    pub pairs: Vec<(Hash, Hash)>,
    pub start: Hash,
    pub hops: usize,
    pub target: Hash,
    pub rendered: String,
    pub seed: u64,
}

impl HashHopSample {
    pub fn chain_length(&self) -> usize {
        self.pairs.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashChainSample {
    /// Edges of all chains in presentation (shuffled) order.
    pub edges: Vec<(Hash, Hash)>,
    pub start: Hash,
    pub chain_lengths: Vec<usize>,
    pub target: Hash,
    pub rendered: String,
    pub seed: u64,
}

impl HashChainSample {
    pub fn num_chains(&self) -> usize {
        self.chain_lengths.len()
    }

    pub fn shortest(&self) -> usize {
        self.chain_lengths.iter().copied().min().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sample {
    HashHop(HashHopSample),
    HashChain(HashChainSample),
}

impl Sample {
    pub fn rendered(&self) -> &str {
        match self {
            Sample::HashHop(s) => &s.rendered,
            Sample::HashChain(s) => &s.rendered,
        }
    }

    pub fn target(&self) -> &Hash {
        match self {
            Sample::HashHop(s) => &s.target,
            Sample::HashChain(s) => &s.target,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Sample::HashHop(s) => s.seed,
            Sample::HashChain(s) => s.seed,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Sample::HashHop(_) => "hashhop",
            Sample::HashChain(_) => "hashchain",
        }
    }

    pub fn hash_len(&self) -> usize {
        self.target().as_str().len()
    }
}

fn render_map(out: &mut String, links: &[(Hash, Hash)]) {
    out.push_str("Map:\n");
    for (a, b) in links {
        out.push_str(a.as_str());
        out.push_str("=>");
        out.push_str(b.as_str());
        out.push('\n');
    }
}

pub fn render_hashhop(pairs: &[(Hash, Hash)], start: &Hash, hops: usize) -> String {
    let mut s = String::new();
    render_map(&mut s, pairs);
    s.push_str(&format!("Start: {start}\nHops: {hops}\nTarget: "));
    s
}

pub fn render_hashchain(edges: &[(Hash, Hash)], start: &Hash) -> String {
    let mut s = String::new();
    render_map(&mut s, edges);
    s.push_str(&format!("Start: {start}\nTask: shortest path\nTarget: "));
    s
}

pub fn gen_hashhop(
    seed: u64,
    chain_length: usize,
    hops: usize,
    cfg: &GenConfig,
) -> Result<HashHopSample> {
    if hops < 1 || hops > chain_length {
        return Err(Error::Params(format!(
            "hops must satisfy 1 <= hops <= chain_length (hops={hops}, chain_length={chain_length})"
        )));
    }
    if chain_length > cfg.max_chain_length {
        return Err(Error::Params(format!(
            "chain_length {chain_length} exceeds max_chain_length {}",
            cfg.max_chain_length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let chain = (0..=chain_length)
        .map(|_| gen_hash(&mut rng, &mut taken, cfg.hash_len))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs: Vec<(Hash, Hash)> = chain
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect();
    pairs.shuffle(&mut rng);
    let start = chain[0].clone();
    let target = chain[hops].clone();
    let rendered = render_hashhop(&pairs, &start, hops);
    Ok(HashHopSample {
        pairs,
        start,
        hops,
        target,
        rendered,
        seed,
    })
}

pub fn gen_hashchain(
    seed: u64,
    num_chains: usize,
    length_range: (usize, usize),
    cfg: &GenConfig,
) -> Result<HashChainSample> {
    let (lo, hi) = length_range;
    if num_chains == 0 {
        return Err(Error::Params("num_chains must be >= 1".into()));
    }
    if lo < 1 || hi < lo {
        return Err(Error::Params(format!(
            "length range must satisfy 1 <= min <= max, got ({lo}, {hi})"
        )));
    }
    if hi > cfg.max_chain_length {
        return Err(Error::Params(format!(
            "max chain length {hi} exceeds max_chain_length {}",
            cfg.max_chain_length
        )));
    }
    if num_chains > 1 && lo == hi {
        return Err(Error::Params(format!(
            "cannot make the shortest of {num_chains} chains unique with all lengths fixed at {lo}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lengths: Vec<usize> = (0..num_chains).map(|_| rng.gen_range(lo..=hi)).collect();
    let min = *lengths.iter().min().expect("non-empty");
    let mut seen_min = false;
    for l in &mut lengths {
        if *l == min {
            if seen_min {
                *l = min + 1;
            }
            seen_min = true;
        }
    }
    let mut taken = HashSet::new();
    let start = gen_hash(&mut rng, &mut taken, cfg.hash_len)?;
    let mut edges = Vec::new();
    let mut target = None;
    for &len in &lengths {
        let mut prev = start.clone();
        for _ in 0..len {
            let next = gen_hash(&mut rng, &mut taken, cfg.hash_len)?;
            edges.push((prev, next.clone()));
            prev = next;
        }
        if len == min {
            target = Some(prev);
        }
    }
    edges.shuffle(&mut rng);
    let rendered = render_hashchain(&edges, &start);
    Ok(HashChainSample {
        edges,
        start,
        chain_lengths: lengths,
        target: target.expect("minimum chain exists"),
        rendered,
        seed,
    })
}

/// Follows `pairs` from `start` for `hops` steps.
pub fn walk_oracle(pairs: &[(Hash, Hash)], start: &Hash, hops: usize) -> Option<Hash> {
    let next: HashMap<&Hash, &Hash> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let mut cur = start;
    for _ in 0..hops {
        cur = next.get(cur)?;
    }
    Some(cur.clone())
}

/// Breadth-first search from `start`; returns every terminal (out-degree 0) node
/// with its depth, in discovery order.
pub fn bfs_terminals(edges: &[(Hash, Hash)], start: &Hash) -> Vec<(Hash, usize)> {
    let mut adj: HashMap<&Hash, Vec<&Hash>> = HashMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
    }
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([(start, 0usize)]);
    let mut out = Vec::new();
    while let Some((node, depth)) = queue.pop_front() {
        match adj.get(node) {
            Some(children) => {
                for &c in children {
                    if seen.insert(c) {
                        queue.push_back((c, depth + 1));
                    }
                }
            }
            None if depth > 0 => out.push((node.clone(), depth)),
            None => {}
        }
    }
    out
}

/// Terminal hash of the shortest chain, or `None` when the minimum depth is tied.
pub fn bfs_oracle(edges: &[(Hash, Hash)], start: &Hash) -> Option<Hash> {
    let terminals = bfs_terminals(edges, start);
    let min = terminals.iter().map(|t| t.1).min()?;
    let mut at_min = terminals.into_iter().filter(|t| t.1 == min);
    let first = at_min.next()?;
    at_min.next().is_none().then_some(first.0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    HashFormat(String),
    DuplicateHash(String),
    SelfLoop(String),
    Structure(String),
    HopsOutOfRange { hops: usize, chain_length: usize },
    NonUniqueMinimum(usize),
    TargetMismatch { expected: Option<Hash>, found: Hash },
    RenderedMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::HashFormat(h) => write!(f, "malformed hash {h:?}"),
            Violation::DuplicateHash(h) => write!(f, "duplicate hash {h}"),
            Violation::SelfLoop(h) => write!(f, "self loop at {h}"),
            Violation::Structure(m) => write!(f, "bad structure: {m}"),
            Violation::HopsOutOfRange { hops, chain_length } => {
                write!(f, "hops {hops} outside 1..={chain_length}")
            }
            Violation::NonUniqueMinimum(m) => write!(f, "non-unique minimum chain length {m}"),
            Violation::TargetMismatch { expected, found } => match expected {
                Some(e) => write!(f, "target mismatch: oracle {e}, sample {found}"),
                None => write!(f, "target mismatch: oracle has no answer, sample {found}"),
            },
            Violation::RenderedMismatch => write!(f, "rendered text does not match template"),
        }
    }
}

fn check_hashes<'a>(hashes: impl Iterator<Item = &'a Hash>, len: usize, out: &mut Vec<Violation>) {
    for h in hashes {
        if Hash::parse(h.as_str(), len).is_none() {
            out.push(Violation::HashFormat(h.to_string()));
        }
    }
}

fn validate_hashhop(s: &HashHopSample) -> Vec<Violation> {
    let mut v = Vec::new();
    let len = s.start.as_str().len();
    check_hashes(
        s.pairs
            .iter()
            .flat_map(|(a, b)| [a, b])
            .chain([&s.start, &s.target]),
        len,
        &mut v,
    );
    for (a, b) in &s.pairs {
        if a == b {
            v.push(Violation::SelfLoop(a.to_string()));
        }
    }
    let chain_length = s.pairs.len();
    if s.hops < 1 || s.hops > chain_length {
        v.push(Violation::HopsOutOfRange {
            hops: s.hops,
            chain_length,
        });
    }
    let mut froms = HashSet::new();
    let mut tos = HashSet::new();
    for (a, b) in &s.pairs {
        if !froms.insert(a) {
            v.push(Violation::DuplicateHash(a.to_string()));
        }
        if !tos.insert(b) {
            v.push(Violation::DuplicateHash(b.to_string()));
        }
    }
    // One simple chain from `start` covering every pair.
    let mut visited = HashSet::from([s.start.clone()]);
    let mut cur = s.start.clone();
    for _ in 0..chain_length {
        match walk_oracle(&s.pairs, &cur, 1) {
            Some(n) if visited.insert(n.clone()) => cur = n,
            Some(n) => {
                v.push(Violation::DuplicateHash(n.to_string()));
                break;
            }
            None => {
                v.push(Violation::Structure(
                    "pairs do not form one chain from start".into(),
                ));
                break;
            }
        }
    }
    let expected = walk_oracle(&s.pairs, &s.start, s.hops);
    if expected.as_ref() != Some(&s.target) {
        v.push(Violation::TargetMismatch {
            expected,
            found: s.target.clone(),
        });
    }
    if s.rendered != render_hashhop(&s.pairs, &s.start, s.hops) {
        v.push(Violation::RenderedMismatch);
    }
    v
}

fn validate_hashchain(s: &HashChainSample) -> Vec<Violation> {
    let mut v = Vec::new();
    let len = s.start.as_str().len();
    check_hashes(
        s.edges
            .iter()
            .flat_map(|(a, b)| [a, b])
            .chain([&s.start, &s.target]),
        len,
        &mut v,
    );
    let mut out_deg: HashMap<&Hash, usize> = HashMap::new();
    let mut in_deg: HashMap<&Hash, usize> = HashMap::new();
    for (a, b) in &s.edges {
        if a == b {
            v.push(Violation::SelfLoop(a.to_string()));
        }
        *out_deg.entry(a).or_default() += 1;
        *in_deg.entry(b).or_default() += 1;
    }
    if in_deg.contains_key(&s.start) {
        v.push(Violation::Structure("start has an incoming edge".into()));
    }
    for (h, &d) in &in_deg {
        if d > 1 {
            v.push(Violation::DuplicateHash(h.to_string()));
        }
    }
    for (h, &d) in &out_deg {
        if *h != &s.start && d > 1 {
            v.push(Violation::Structure(format!("{h} branches mid-chain")));
        }
    }
    let start_out = out_deg.get(&s.start).copied().unwrap_or(0);
    if start_out != s.chain_lengths.len() {
        v.push(Violation::Structure(format!(
            "{start_out} chains leave start but {} lengths recorded",
            s.chain_lengths.len()
        )));
    }
    let terminals = bfs_terminals(&s.edges, &s.start);
    let reached: usize = terminals.iter().map(|t| t.1).sum();
    if reached != s.edges.len() {
        v.push(Violation::Structure(
            "edges not all on chains from start".into(),
        ));
    }
    let mut found: Vec<usize> = terminals.iter().map(|t| t.1).collect();
    let mut recorded = s.chain_lengths.clone();
    found.sort_unstable();
    recorded.sort_unstable();
    if found != recorded {
        v.push(Violation::Structure(format!(
            "chain lengths {found:?} but recorded {recorded:?}"
        )));
    }
    if let Some(&min) = found.first() {
        if found.iter().filter(|&&l| l == min).count() > 1 {
            v.push(Violation::NonUniqueMinimum(min));
        }
    }
    let expected = bfs_oracle(&s.edges, &s.start);
    if expected.as_ref() != Some(&s.target) {
        v.push(Violation::TargetMismatch {
            expected,
            found: s.target.clone(),
        });
    }
    if s.rendered != render_hashchain(&s.edges, &s.start) {
        v.push(Violation::RenderedMismatch);
    }
    v
}

/// Re-derives the answer by oracle and checks every structural invariant.
pub fn validate(sample: &Sample) -> std::result::Result<(), Vec<Violation>> {
    let v = match sample {
        Sample::HashHop(s) => validate_hashhop(s),
        Sample::HashChain(s) => validate_hashchain(s),
    };
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Meta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    hops: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    chain_lengths: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Record {
    kind: String,
    seed: u64,
    rendered: String,
    target: String,
    meta: Meta,
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        let meta = match s {
            Sample::HashHop(h) => Meta {
                hops: Some(h.hops),
                chain_lengths: None,
            },
            Sample::HashChain(c) => Meta {
                hops: None,
                chain_lengths: Some(c.chain_lengths.clone()),
            },
        };
        Record {
            kind: s.kind().to_owned(),
            seed: s.seed(),
            rendered: s.rendered().to_owned(),
            target: s.target().to_string(),
            meta,
        }
    }
}

/// Parses the `Map:` block and the `Start:` line of a rendered prompt.
fn parse_prompt(
    rendered: &str,
    hash_len: usize,
) -> std::result::Result<(Vec<(Hash, Hash)>, Hash, Vec<String>), String> {
    let mut lines = rendered.split('\n');
    if lines.next() != Some("Map:") {
        return Err("missing Map: header".into());
    }
    let mut links = Vec::new();
    let mut rest = Vec::new();
    for line in lines.by_ref() {
        if let Some((a, b)) = line.split_once("=>") {
            let a = Hash::parse(a, hash_len).ok_or_else(|| format!("bad hash {a:?}"))?;
            let b = Hash::parse(b, hash_len).ok_or_else(|| format!("bad hash {b:?}"))?;
            links.push((a, b));
        } else {
            rest.push(line.to_owned());
            break;
        }
    }
    rest.extend(lines.map(str::to_owned));
    let start_line = rest.first().ok_or("missing Start: line")?;
    let start = start_line
        .strip_prefix("Start: ")
        .and_then(|s| Hash::parse(s, hash_len))
        .ok_or_else(|| format!("bad start line {start_line:?}"))?;
    Ok((links, start, rest))
}

fn record_to_sample(r: Record) -> std::result::Result<Sample, String> {
    let hash_len = r.target.len();
    let target = Hash::parse(&r.target, hash_len).ok_or("bad target hash")?;
    let (links, start, _) = parse_prompt(&r.rendered, hash_len)?;
    match r.kind.as_str() {
        "hashhop" => {
            let hops = r.meta.hops.ok_or("hashhop record without meta.hops")?;
            Ok(Sample::HashHop(HashHopSample {
                pairs: links,
                start,
                hops,
                target,
                rendered: r.rendered,
                seed: r.seed,
            }))
        }
        "hashchain" => {
            let chain_lengths = r
                .meta
                .chain_lengths
                .ok_or("hashchain record without meta.chain_lengths")?;
            Ok(Sample::HashChain(HashChainSample {
                edges: links,
                start,
                chain_lengths,
                target,
                rendered: r.rendered,
                seed: r.seed,
            }))
        }
        other => Err(format!("unknown kind {other:?}")),
    }
}

/// Writes one JSON object per line (UTF-8, LF).
pub fn emit_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&Record::from(s)).expect("record serializes");
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let malformed = |msg: String| Error::Malformed {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        out.push(record_to_sample(record).map_err(malformed)?);
    }
    Ok(out)
}

/// SplitMix64 finalizer; derives independent per-sample seeds from a stream seed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A distribution over benchmark samples used for training streams and eval grids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    /// Hops uniform in `hops`; chain length fixed at `chain_length`.
    HashHop {
        hops: (usize, usize),
        chain_length: usize,
    },
    /// Chain count uniform over `chains`; per-chain lengths uniform in `lengths`.
    HashChain {
        chains: Vec<usize>,
        lengths: (usize, usize),
    },
}

impl TaskSpec {
    pub fn sample(&self, seed: u64, cfg: &GenConfig) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED);
        match self {
            TaskSpec::HashHop { hops, chain_length } => {
                let h = rng.gen_range(hops.0..=hops.1);
                Ok(Sample::HashHop(gen_hashhop(seed, *chain_length, h, cfg)?))
            }
            TaskSpec::HashChain { chains, lengths } => {
                let c = *chains
                    .choose(&mut rng)
                    .ok_or_else(|| Error::Params("empty chain-count list".into()))?;
                Ok(Sample::HashChain(gen_hashchain(seed, c, *lengths, cfg)?))
            }
        }
    }

    /// The `index`-th sample of the stream keyed by `seed`.
    pub fn nth(&self, seed: u64, index: u64, cfg: &GenConfig) -> Result<Sample> {
        self.sample(mix_seed(seed, index), cfg)
    }

    /// Longest rendered prompt this spec can produce, in characters.
    pub fn max_prompt_len(&self, cfg: &GenConfig) -> usize {
        let line = 2 * cfg.hash_len + 3;
        let start_line = 8 + cfg.hash_len;
        match self {
            TaskSpec::HashHop { hops, chain_length } => {
                5 + chain_length * line + start_line + format!("Hops: {}\n", hops.1).len() + 8
            }
            TaskSpec::HashChain { chains, lengths } => {
                // Ties for the shortest chain are broken by lengthening the extras by one edge.
                let edges = |c: usize| {
                    if c > 1 {
                        lengths.1 + (c - 1) * (lengths.1 + 1)
                    } else {
                        c * lengths.1
                    }
                };
                let e = chains.iter().map(|&c| edges(c)).max().unwrap_or(0);
                5 + e * line + start_line + 20 + 8
            }
        }
    }
}
