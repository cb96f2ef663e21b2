//! Toy corpora: synthetic generators with known ground truth, and
//! character-level text.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{space_size, EnumeratedDist, MAX_ENUMERATED};
use crate::{par_map, stream_rng};

/// How a corpus was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroundTruth {
    IidCategorical {
        probs: Vec<f64>,
        seed: u64,
    },
    MarkovChain {
        initial: Vec<f64>,
        /// Row `i` is the next-token distribution after token `i`.
        transition: Vec<Vec<f64>>,
        seed: u64,
    },
    RawText,
}

impl GroundTruth {
    /// Exact sequence distribution for generated corpora.
    pub fn enumerate(&self, seq_len: usize) -> Result<EnumeratedDist> {
        match self {
            GroundTruth::IidCategorical { probs, .. } => {
                EnumeratedDist::product(probs.len(), &vec![probs.clone(); seq_len])
            }
            GroundTruth::MarkovChain {
                initial,
                transition,
                ..
            } => {
                let n = initial.len();
                let size = space_size(n, seq_len)
                    .filter(|&s| s <= MAX_ENUMERATED)
                    .ok_or(Error::Capacity {
                        what: "enumerated Markov corpus",
                        size: space_size(n, seq_len).unwrap_or(usize::MAX),
                        limit: MAX_ENUMERATED,
                    })?;
                let mut probs = Vec::with_capacity(size);
                for idx in 0..size {
                    let seq = crate::oracle::decode_sequence(idx, n, seq_len);
                    let mut p = initial[seq[0]];
                    for w in seq.windows(2) {
                        p *= transition[w[0]][w[1]];
                    }
                    probs.push(p);
                }
                EnumeratedDist::new(n, seq_len, probs)
            }
            GroundTruth::RawText => Err(Error::arg("raw text has no enumerable ground truth")),
        }
    }

    /// Exact entropy of one length-`seq_len` sequence, in nats.
    pub fn sequence_entropy(&self, seq_len: usize) -> Result<f64> {
        match self {
            GroundTruth::IidCategorical { probs, .. } => Ok(seq_len as f64 * entropy(probs)),
            GroundTruth::MarkovChain {
                initial,
                transition,
                ..
            } => {
                let mut marginal = initial.clone();
                let mut h = entropy(initial);
                for _ in 1..seq_len {
                    h += marginal
                        .iter()
                        .zip(transition)
                        .map(|(m, row)| m * entropy(row))
                        .sum::<f64>();
                    marginal = step_markov(&marginal, transition);
                }
                Ok(h)
            }
            GroundTruth::RawText => Err(Error::arg("raw text has no closed-form entropy")),
        }
    }

    /// Long-run entropy per token of a Markov chain, `Σ_i μ_i H(row_i)`.
    pub fn entropy_rate(&self) -> Result<f64> {
        match self {
            GroundTruth::IidCategorical { probs, .. } => Ok(entropy(probs)),
            GroundTruth::MarkovChain { transition, .. } => {
                let mu = markov_stationary(transition);
                Ok(mu.iter().zip(transition).map(|(m, row)| m * entropy(row)).sum())
            }
            GroundTruth::RawText => Err(Error::arg("raw text has no closed-form entropy")),
        }
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn step_markov(marginal: &[f64], transition: &[Vec<f64>]) -> Vec<f64> {
    let n = marginal.len();
    let mut next = vec![0.0; n];
    for (i, &m) in marginal.iter().enumerate() {
        for j in 0..n {
            next[j] += m * transition[i][j];
        }
    }
    next
}

/// Stationary distribution by power iteration on the lazy chain.
pub fn markov_stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut mu = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let stepped = step_markov(&mu, transition);
        let next: Vec<f64> = mu.iter().zip(&stepped).map(|(a, b)| 0.5 * (a + b)).collect();
        let delta: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        mu = next;
        if delta < 1e-15 {
            break;
        }
    }
    mu
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::arg(format!("{what} has invalid entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Fixed-length token sequences over `0..num_tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    num_tokens: usize,
    seq_len: usize,
    sequences: Vec<Vec<usize>>,
    truth: Option<GroundTruth>,
}

impl Corpus {
    pub fn new(num_tokens: usize, seq_len: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if num_tokens == 0 || num_tokens > u16::MAX as usize + 1 {
            return Err(Error::arg(format!("vocabulary size {num_tokens} unsupported")));
        }
        if seq_len == 0 {
            return Err(Error::arg("sequence length must be positive"));
        }
        for s in &sequences {
            if s.len() != seq_len {
                return Err(Error::arg(format!("sequence of length {} in a length-{seq_len} corpus", s.len())));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= num_tokens) {
                return Err(Error::arg(format!("token {t} out of range for {num_tokens} tokens")));
            }
        }
        Ok(Self {
            num_tokens,
            seq_len,
            sequences,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// Leading `1 - valid_fraction` of the sequences and the rest.
    pub fn split(&self, valid_fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::arg(format!("validation fraction {valid_fraction} outside [0, 1)")));
        }
        let cut = self.len() - (self.len() as f64 * valid_fraction).round() as usize;
        let part = |seqs: &[Vec<usize>]| Corpus {
            num_tokens: self.num_tokens,
            seq_len: self.seq_len,
            sequences: seqs.to_vec(),
            truth: self.truth.clone(),
        };
        Ok((part(&self.sequences[..cut]), part(&self.sequences[cut..])))
    }

    /// Token frequencies over the whole corpus.
    pub fn unigram(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_tokens];
        for s in &self.sequences {
            for &t in s {
                counts[t] += 1.0;
            }
        }
        let total = (self.len() * self.seq_len) as f64;
        counts.iter().map(|c| c / total).collect()
    }

    /// Entropy of [`Corpus::unigram`], nats per token.
    pub fn unigram_entropy(&self) -> f64 {
        entropy(&self.unigram())
    }

    /// Empirical distribution over whole sequences.
    pub fn empirical(&self) -> Result<EnumeratedDist> {
        let size = space_size(self.num_tokens, self.seq_len)
            .filter(|&s| s <= MAX_ENUMERATED)
            .ok_or(Error::Capacity {
                what: "empirical sequence distribution",
                size: space_size(self.num_tokens, self.seq_len).unwrap_or(usize::MAX),
                limit: MAX_ENUMERATED,
            })?;
        let mut w = vec![0.0; size];
        for s in &self.sequences {
            w[crate::oracle::encode_sequence(s, self.num_tokens)] += 1.0;
        }
        EnumeratedDist::from_weights(self.num_tokens, self.seq_len, w)
    }

    /// Writes the binary format: `u32` LE `num_tokens`, `seq_len`, `count`,
    /// then every token as a `u16` LE, sequence after sequence.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 2 * self.len() * self.seq_len);
        for v in [self.num_tokens, self.seq_len, self.len()] {
            let v = u32::try_from(v).map_err(|_| Error::arg("corpus too large for the file format"))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.sequences {
            for &t in s {
                buf.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 12 {
            return Err(Error::Ingestion(format!("{}: header truncated", path.display())));
        }
        let word = |k: usize| u32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (n, d, count) = (word(0), word(1), word(2));
        let expected = count
            .checked_mul(d)
            .and_then(|v| v.checked_mul(2))
            .and_then(|v| v.checked_add(12));
        if expected != Some(buf.len()) {
            return Err(Error::Ingestion(format!(
                "{}: header announces {count} sequences of length {d}, file has {} bytes",
                path.display(),
                buf.len()
            )));
        }
        if d == 0 {
            return Err(Error::Ingestion(format!("{}: zero sequence length", path.display())));
        }
        let tokens: Vec<usize> = buf[12..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        let sequences = tokens.chunks(d).map(<[usize]>::to_vec).collect();
        Corpus::new(n, d, sequences).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
    }
}

/// `count` sequences of `seq_len` iid tokens drawn from `probs`.
pub fn gen_iid(num_tokens: usize, seq_len: usize, probs: &[f64], count: usize, seed: u64) -> Result<Corpus> {
    if probs.len() != num_tokens {
        return Err(Error::arg("probability vector does not match the vocabulary"));
    }
    check_distribution(probs, "token distribution")?;
    let dist = WeightedIndex::new(probs).map_err(|e| Error::arg(e.to_string()))?;
    let sequences = par_map(count, |k| {
        let mut rng = stream_rng(seed, k as u64);
        (0..seq_len).map(|_| dist.sample(&mut rng)).collect()
    });
    Ok(Corpus::new(num_tokens, seq_len, sequences)?.with_truth(GroundTruth::IidCategorical {
        probs: probs.to_vec(),
        seed,
    }))
}

/// `count` independent runs of an order-1 Markov chain.
pub fn gen_markov(
    num_tokens: usize,
    seq_len: usize,
    initial: &[f64],
    transition: &[Vec<f64>],
    count: usize,
    seed: u64,
) -> Result<Corpus> {
    if initial.len() != num_tokens || transition.len() != num_tokens {
        return Err(Error::arg("chain does not match the vocabulary"));
    }
    check_distribution(initial, "initial distribution")?;
    for (i, row) in transition.iter().enumerate() {
        if row.len() != num_tokens {
            return Err(Error::arg(format!("transition row {i} has the wrong length")));
        }
        check_distribution(row, &format!("transition row {i}"))?;
    }
    let init = WeightedIndex::new(initial).map_err(|e| Error::arg(e.to_string()))?;
    let rows: Vec<WeightedIndex<f64>> = transition
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::arg(e.to_string())))
        .collect::<Result<_>>()?;
    let sequences = par_map(count, |k| {
        let mut rng = stream_rng(seed, k as u64);
        let mut seq = Vec::with_capacity(seq_len);
        let mut cur = init.sample(&mut rng);
        seq.push(cur);
        for _ in 1..seq_len {
            cur = rows[cur].sample(&mut rng);
            seq.push(cur);
        }
        seq
    });
    Ok(Corpus::new(num_tokens, seq_len, sequences)?.with_truth(GroundTruth::MarkovChain {
        initial: initial.to_vec(),
        transition: transition.to_vec(),
        seed,
    }))
}

/// Regenerates a synthetic corpus from its descriptor.
pub fn regenerate(truth: &GroundTruth, seq_len: usize, count: usize) -> Result<Corpus> {
    match truth {
        GroundTruth::IidCategorical { probs, seed } => gen_iid(probs.len(), seq_len, probs, count, *seed),
        GroundTruth::MarkovChain {
            initial,
            transition,
            seed,
        } => gen_markov(initial.len(), seq_len, initial, transition, count, *seed),
        GroundTruth::RawText => Err(Error::arg("raw text cannot be regenerated")),
    }
}

/// Character vocabulary; a token id is the character's index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Ingestion(format!("duplicate vocabulary character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Ingestion("empty vocabulary".into()));
        }
        Ok(Self { chars, index })
    }

    /// `a` through `z`.
    pub fn lowercase() -> Self {
        Self::new(('a'..='z').collect()).expect("distinct letters")
    }

    /// Every distinct character of `text`, in sorted order.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.chars().collect::<BTreeSet<_>>().into_iter().collect())
    }

    /// One character per line; the line number is the token id. A line
    /// holding the two characters `\n` stands for a newline and `\s` for a
    /// space.
    pub fn parse(contents: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (lineno, line) in contents.lines().enumerate() {
            let c = match line {
                "\\n" => '\n',
                "\\s" => ' ',
                _ => {
                    let mut it = line.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(Error::Ingestion(format!(
                                "vocabulary line {} must hold exactly one character",
                                lineno + 1
                            )))
                        }
                    }
                }
            };
            chars.push(c);
        }
        Self::new(chars)
    }

    pub fn render(&self) -> String {
        self.chars
            .iter()
            .map(|&c| match c {
                '\n' => "\\n\n".to_string(),
                ' ' => "\\s\n".to_string(),
                c => format!("{c}\n"),
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }
}

/// Splits `text` into length-`seq_len` chunks of token ids. An incomplete
/// final chunk is dropped. Characters outside the vocabulary map to
/// `unknown` when it is given and are an error otherwise.
pub fn tokenize_chars(text: &str, vocab: &Vocab, seq_len: usize, unknown: Option<usize>) -> Result<Corpus> {
    if let Some(u) = unknown {
        if u >= vocab.len() {
            return Err(Error::arg(format!("unknown token {u} outside the vocabulary")));
        }
    }
    let mut ids = Vec::with_capacity(text.len());
    let mut missing = BTreeSet::new();
    for c in text.chars() {
        match (vocab.id(c), unknown) {
            (Some(id), _) => ids.push(id),
            (None, Some(u)) => ids.push(u),
            (None, None) => {
                missing.insert(c);
            }
        }
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|c| format!("{c:?}")).collect();
        return Err(Error::Ingestion(format!(
            "characters outside the vocabulary: {}",
            list.join(", ")
        )));
    }
    let sequences = ids.chunks_exact(seq_len.max(1)).map(<[usize]>::to_vec).collect();
    Ok(Corpus::new(vocab.len(), seq_len, sequences)?.with_truth(GroundTruth::RawText))
}

/// Inverse of [`tokenize_chars`] for one sequence. Ids outside the
/// vocabulary (such as MASK) render as `?`.
pub fn detokenize(seq: &[usize], vocab: &Vocab) -> String {
    seq.iter().map(|&t| vocab.char_of(t).unwrap_or('?')).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_gives_zero_sequences() {
        let c = gen_iid(3, 4, &[1.0, 0.0, 0.0], 50, 1).unwrap();
        assert!(c.sequences().iter().all(|s| s.iter().all(|&t| t == 0)));
    }

    #[test]
    fn iid_frequencies() {
        let probs = [0.4, 0.3, 0.2, 0.1];
        let c = gen_iid(4, 1, &probs, 100_000, 7).unwrap();
        for (f, p) in c.unigram().iter().zip(probs) {
            assert!((f - p).abs() <= 0.005, "{f} vs {p}");
        }
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(gen_iid(2, 1, &[0.5, 0.6], 1, 0).is_err());
        assert!(gen_iid(2, 1, &[0.5], 1, 0).is_err());
        assert!(gen_markov(2, 3, &[0.5, 0.5], &[vec![1.0, 0.0], vec![0.2, 0.9]], 1, 0).is_err());
    }

    fn chain() -> (Vec<f64>, Vec<Vec<f64>>) {
        (
            vec![0.5, 0.3, 0.2],
            vec![vec![0.1, 0.6, 0.3], vec![0.4, 0.4, 0.2], vec![0.7, 0.1, 0.2]],
        )
    }

    #[test]
    fn markov_entropy_rate_matches_transition_counts() {
        let (init, trans) = chain();
        let c = gen_markov(3, 2000, &init, &trans, 50, 3).unwrap();
        let mut counts = vec![vec![0.0; 3]; 3];
        for s in c.sequences() {
            for w in s.windows(2) {
                counts[w[0]][w[1]] += 1.0;
            }
        }
        let total: f64 = counts.iter().flatten().sum();
        let mut h = 0.0;
        for row in &counts {
            let r: f64 = row.iter().sum();
            let cond: Vec<f64> = row.iter().map(|v| v / r).collect();
            h += r / total * entropy(&cond);
        }
        let exact = c.truth().unwrap().entropy_rate().unwrap();
        assert!((h - exact).abs() < 0.01, "{h} vs {exact}");
    }

    #[test]
    fn markov_sequence_entropy_matches_enumeration() {
        let (init, trans) = chain();
        let truth = GroundTruth::MarkovChain {
            initial: init,
            transition: trans,
            seed: 0,
        };
        let p = truth.enumerate(4).unwrap();
        assert!((entropy(p.probs()) - truth.sequence_entropy(4).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn regeneration_is_identical() {
        let (init, trans) = chain();
        let c = gen_markov(3, 6, &init, &trans, 40, 9).unwrap();
        assert_eq!(regenerate(c.truth().unwrap(), 6, 40).unwrap(), c);
        let c = gen_iid(3, 2, &[0.2, 0.3, 0.5], 40, 4).unwrap();
        assert_eq!(regenerate(c.truth().unwrap(), 2, 40).unwrap(), c);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::lowercase();
        let c = tokenize_chars("abc", &v, 3, None).unwrap();
        assert_eq!(c.sequences(), &[vec![0, 1, 2]]);
        let c = tokenize_chars("abcdefghi", &v, 4, None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(detokenize(&c.sequences()[1], &v), "efgh");
        match tokenize_chars("ab!c?", &v, 1, None) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("'!'") && msg.contains("'?'")),
            other => panic!("{other:?}"),
        }
        let c = tokenize_chars("a!", &v, 2, Some(25)).unwrap();
        assert_eq!(c.sequences(), &[vec![0, 25]]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::new(vec!['a', ' ', '\n', 'z']).unwrap();
        assert_eq!(Vocab::parse(&v.render()).unwrap(), v);
        assert!(Vocab::parse("ab\n").is_err());
        assert!(Vocab::new(vec!['a', 'a']).is_err());
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = gen_iid(5, 3, &[0.2; 5], 17, 2).unwrap();
        c.save(&path).unwrap();
        let back = Corpus::load(&path).unwrap();
        assert_eq!(back.sequences(), c.sequences());
        assert_eq!((back.num_tokens(), back.seq_len()), (5, 3));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Corpus::load(&path), Err(Error::Ingestion(_))));
        assert!(matches!(Corpus::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }

    #[test]
    fn split_sizes() {
        let c = gen_iid(2, 2, &[0.5, 0.5], 10, 0).unwrap();
        let (a, b) = c.split(0.2).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(b.sequences(), &c.sequences()[8..]);
    }
}
