//! Edit distance, character error rate, and modality-attention statistics.

use serde::Serialize;

/// Unit-cost Levenshtein outcome with operation counts from one canonical
/// backtrace (deletion preferred over insertion over substitution on ties).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EditOps {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Levenshtein distance from `reference` to `hypothesis`. Deletions are
/// reference symbols the hypothesis dropped; insertions are extra hypothesis
/// symbols.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let m = reference.len();
    let n = hypothesis.len();
    let mut d = vec![0usize; (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 0..=m {
        d[idx(i, 0)] = i;
    }
    for j in 0..=n {
        d[idx(0, j)] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[idx(i, j)] = (d[idx(i - 1, j)] + 1)
                .min(d[idx(i, j - 1)] + 1)
                .min(d[idx(i - 1, j - 1)] + cost);
        }
    }

    // Canonical backtrace: deletion, then insertion, then diagonal.
    let mut ops = EditOps {
        distance: d[idx(m, n)],
        substitutions: 0,
        insertions: 0,
        deletions: 0,
    };
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = d[idx(i, j)];
        if i > 0 && d[idx(i - 1, j)] + 1 == here {
            ops.deletions += 1;
            i -= 1;
        } else if j > 0 && d[idx(i, j - 1)] + 1 == here {
            ops.insertions += 1;
            j -= 1;
        } else {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            debug_assert_eq!(d[idx(i - 1, j - 1)] + cost, here);
            ops.substitutions += cost;
            i -= 1;
            j -= 1;
        }
    }
    ops
}

/// One utterance's scoring record, the unit persisted to decode JSONL output.
#[derive(Clone, Debug, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl UtteranceScore {
    pub fn new<T: PartialEq>(id: String, reference: &[T], hypothesis: &[T]) -> Self {
        let ops = edit_distance(reference, hypothesis);
        UtteranceScore {
            id,
            ref_len: reference.len(),
            hyp_len: hypothesis.len(),
            distance: ops.distance,
            substitutions: ops.substitutions,
            insertions: ops.insertions,
            deletions: ops.deletions,
        }
    }
}

/// Corpus-level CER: total edit distance over total reference length
/// (micro-average).
#[derive(Clone, Debug, Serialize)]
pub struct CerReport {
    pub utterances: Vec<UtteranceScore>,
    pub cer: f64,
    pub total_distance: usize,
    pub total_ref_len: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl CerReport {
    pub fn from_scores(utterances: Vec<UtteranceScore>) -> Self {
        let total_distance = utterances.iter().map(|u| u.distance).sum();
        let total_ref_len: usize = utterances.iter().map(|u| u.ref_len).sum();
        let cer = if total_ref_len == 0 {
            if total_distance == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            total_distance as f64 / total_ref_len as f64
        };
        CerReport {
            cer,
            total_distance,
            total_ref_len,
            substitutions: utterances.iter().map(|u| u.substitutions).sum(),
            insertions: utterances.iter().map(|u| u.insertions).sum(),
            deletions: utterances.iter().map(|u| u.deletions).sum(),
            utterances,
        }
    }
}

/// Mean modality-attention weights over decoding steps.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionReport {
    pub mean_audio: f64,
    pub mean_video: f64,
    pub steps: usize,
    /// Breakdown keyed by the audio stream's applied-SNR label.
    pub per_snr: Vec<SnrAttention>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SnrAttention {
    pub label: String,
    pub mean_audio: f64,
    pub mean_video: f64,
    pub steps: usize,
}

#[derive(Default)]
pub struct AttentionAccumulator {
    sum_audio: f64,
    sum_video: f64,
    steps: usize,
    per_snr: Vec<(String, f64, f64, usize)>,
}

impl AttentionAccumulator {
    pub fn add(&mut self, snr_label: &str, weights: &[[f64; 2]]) {
        for w in weights {
            self.sum_audio += w[0];
            self.sum_video += w[1];
        }
        self.steps += weights.len();
        match self.per_snr.iter_mut().find(|(l, ..)| l == snr_label) {
            Some((_, a, v, n)) => {
                for w in weights {
                    *a += w[0];
                    *v += w[1];
                }
                *n += weights.len();
            }
            None => {
                let a: f64 = weights.iter().map(|w| w[0]).sum();
                let v: f64 = weights.iter().map(|w| w[1]).sum();
                self.per_snr.push((snr_label.to_string(), a, v, weights.len()));
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn finish(self) -> AttentionReport {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        AttentionReport {
            mean_audio: mean(self.sum_audio, self.steps),
            mean_video: mean(self.sum_video, self.steps),
            steps: self.steps,
            per_snr: self
                .per_snr
                .into_iter()
                .map(|(label, a, v, n)| SnrAttention {
                    label,
                    mean_audio: mean(a, n),
                    mean_video: mean(v, n),
                    steps: n,
                })
                .collect(),
        }
    }
}
