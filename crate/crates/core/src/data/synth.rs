//! Attribute-progression completion tasks.
//!
//! Each instance shows three panels described by (size, color, shape). Every
//! attribute either stays constant or advances one step through its pool
//! (cyclically); the answer is the fourth panel. Instances are rendered in a
//! wordy text template or a compact symbolic one over the same attribute
//! words.
//!
//! Splits: `train` and `iid-test` share a distribution; `ood-a` asks for
//! (color, shape) pairs that never appear in any panel of the other splits;
//! `ood-b` raises the share of progressing attributes.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Format, Split, TaskInstance};
use crate::error::{Error, Result};
use crate::rng::{sample_without_replacement, stream};

pub const SIZES: [&str; 8] = [
    "tiny", "small", "little", "medium", "big", "large", "huge", "giant",
];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
];
pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "star", "hexagon", "diamond", "cross", "heart",
];

/// Task family: the direction of progressions and the template set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Ascending,
    Descending,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Ascending => "ascending",
            Family::Descending => "descending",
        }
    }

    pub fn step(self) -> i64 {
        match self {
            Family::Ascending => 1,
            Family::Descending => -1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub family: Family,
    pub n_train: usize,
    /// Instances per test split.
    pub n_test: usize,
    pub n_sizes: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    /// Number of (color, shape) pairs reserved for `ood-a`.
    pub held_out_pairs: usize,
    /// Chance that an attribute progresses in train / iid-test / ood-a.
    pub progression_prob: f64,
    /// Same chance for `ood-b`.
    pub ood_b_progression_prob: f64,
    /// Whether to attach the family name to each instance.
    pub label_family: bool,
    pub max_prompt_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: crate::rng::DEFAULT_SEED,
            family: Family::Ascending,
            n_train: 2000,
            n_test: 200,
            n_sizes: 8,
            n_colors: 8,
            n_shapes: 8,
            held_out_pairs: 8,
            progression_prob: 0.3,
            ood_b_progression_prob: 0.9,
            label_family: false,
            max_prompt_tokens: 48,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Panel {
    pub size: usize,
    pub color: usize,
    pub shape: usize,
}

impl Panel {
    pub fn words(&self) -> String {
        format!(
            "{} {} {}",
            SIZES[self.size], COLORS[self.color], SHAPES[self.shape]
        )
    }
}

/// Render context panels as a prompt.
pub fn render(family: Family, format: Format, panels: &[Panel]) -> String {
    let p: Vec<String> = panels.iter().map(Panel::words).collect();
    match (family, format) {
        (Family::Ascending, Format::Text) => format!(
            "the first is a {} , the second is a {} , the third is a {} , what is the fourth ?",
            p[0], p[1], p[2]
        ),
        (Family::Ascending, Format::Symbolic) => {
            format!("( {} ) ( {} ) ( {} ) ( ? )", p[0], p[1], p[2])
        }
        (Family::Descending, Format::Text) => format!(
            "panel one shows {} ; panel two shows {} ; panel three shows {} ; next panel ?",
            p[0], p[1], p[2]
        ),
        (Family::Descending, Format::Symbolic) => {
            format!("[ {} ] [ {} ] [ {} ] [ ? ]", p[0], p[1], p[2])
        }
    }
}

/// Every word any family or format can emit, for vocabulary construction.
pub fn all_words() -> Vec<&'static str> {
    let mut words: BTreeSet<&'static str> = BTreeSet::new();
    words.extend(SIZES);
    words.extend(COLORS);
    words.extend(SHAPES);
    words.extend(TEMPLATE_WORDS);
    words.into_iter().collect()
}

const TEMPLATE_WORDS: [&str; 21] = [
    "the", "first", "is", "a", ",", "second", "third", "what", "fourth", "?", "(", ")", "panel",
    "one", "shows", ";", "two", "three", "next", "[", "]",
];

struct Generator<'a> {
    cfg: &'a SynthConfig,
    held_out: HashSet<(usize, usize)>,
    seen: HashSet<String>,
}

impl Generator<'_> {
    fn sample_panels(&self, rng: &mut ChaCha8Rng, prob: f64) -> [Panel; 4] {
        let c = self.cfg;
        let step = c.family.step();
        let mut st = [0i64; 3];
        for s in &mut st {
            if rng.gen_bool(prob.clamp(0.0, 1.0)) {
                *s = step;
            }
        }
        let start = [
            rng.gen_range(0..c.n_sizes),
            rng.gen_range(0..c.n_colors),
            rng.gen_range(0..c.n_shapes),
        ];
        let pools = [c.n_sizes, c.n_colors, c.n_shapes];
        let at = |k: i64, a: usize| -> usize {
            (start[a] as i64 + k * st[a]).rem_euclid(pools[a] as i64) as usize
        };
        std::array::from_fn(|k| Panel {
            size: at(k as i64, 0),
            color: at(k as i64, 1),
            shape: at(k as i64, 2),
        })
    }

    fn split(&mut self, split: Split, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TaskInstance>> {
        let prob = if split == Split::OodB {
            self.cfg.ood_b_progression_prob
        } else {
            self.cfg.progression_prob
        };
        let mut out = Vec::with_capacity(n);
        let budget = 2000 + 500 * n;
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Generation(format!(
                    "could only draw {} unique {} instances out of {n}; enlarge the attribute pools",
                    out.len(),
                    split
                )));
            }
            let format = if out.len() % 2 == 0 {
                Format::Text
            } else {
                Format::Symbolic
            };
            let panels = self.sample_panels(rng, prob);
            let answer_pair = (panels[3].color, panels[3].shape);
            let ok = if split == Split::OodA {
                self.held_out.contains(&answer_pair)
            } else {
                panels
                    .iter()
                    .all(|p| !self.held_out.contains(&(p.color, p.shape)))
            };
            if !ok {
                continue;
            }
            let prompt = render(self.cfg.family, format, &panels[..3]);
            if prompt.split_whitespace().count() > self.cfg.max_prompt_tokens
                || !self.seen.insert(prompt.clone())
            {
                continue;
            }
            out.push(TaskInstance {
                prompt,
                answer: panels[3].words(),
                format,
                split,
                family: self
                    .cfg
                    .label_family
                    .then(|| self.cfg.family.as_str().to_string()),
            });
        }
        Ok(out)
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let pools = [
            (self.n_sizes, "n_sizes"),
            (self.n_colors, "n_colors"),
            (self.n_shapes, "n_shapes"),
        ];
        for (n, name) in pools {
            if n == 0 || n > 8 {
                return Err(Error::Config(format!("{name} must be in 1..=8, got {n}")));
            }
        }
        let pairs = self.n_colors * self.n_shapes;
        if self.held_out_pairs == 0 || 2 * self.held_out_pairs > pairs {
            return Err(Error::Generation(format!(
                "cannot reserve {} unseen (color, shape) pairs out of {pairs}; at most half may be held out",
                self.held_out_pairs
            )));
        }
        Ok(())
    }

    /// The (color, shape) pairs reserved for `ood-a`.
    pub fn held_out(&self) -> Result<HashSet<(usize, usize)>> {
        self.validate()?;
        let mut rng = stream(self.seed, "synth/held-out");
        let pairs = self.n_colors * self.n_shapes;
        Ok(
            sample_without_replacement(&mut rng, pairs, self.held_out_pairs)
                .into_iter()
                .map(|i| (i / self.n_shapes, i % self.n_shapes))
                .collect(),
        )
    }
}

/// Generate all four splits in order train, iid-test, ood-a, ood-b.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<TaskInstance>> {
    let held_out = cfg.held_out()?;
    let mut gen = Generator {
        cfg,
        held_out,
        seen: HashSet::new(),
    };
    let mut out = Vec::new();
    for split in Split::ALL {
        let n = if split == Split::Train {
            cfg.n_train
        } else {
            cfg.n_test
        };
        let mut rng = stream(cfg.seed, &format!("synth/{}/{split}", cfg.family.as_str()));
        out.extend(gen.split(split, n, &mut rng)?);
    }
    Ok(out)
}

/// Rule-free instances for pretraining: four independent random panels in
/// either family's templates.
pub fn generic_corpus(cfg: &SynthConfig, n: usize) -> Vec<TaskInstance> {
    let mut rng = stream(cfg.seed, "synth/generic");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let family = if (i / 2) % 2 == 0 {
            Family::Ascending
        } else {
            Family::Descending
        };
        let format = if i % 2 == 0 {
            Format::Text
        } else {
            Format::Symbolic
        };
        let panels: [Panel; 4] = std::array::from_fn(|_| Panel {
            size: rng.gen_range(0..cfg.n_sizes),
            color: rng.gen_range(0..cfg.n_colors),
            shape: rng.gen_range(0..cfg.n_shapes),
        });
        out.push(TaskInstance {
            prompt: render(family, format, &panels[..3]),
            answer: panels[3].words(),
            format,
            split: Split::Train,
            family: None,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_both_formats() {
        let p = [Panel {
            size: 0,
            color: 1,
            shape: 2,
        }; 3];
        assert_eq!(
            render(Family::Ascending, Format::Symbolic, &p),
            "( tiny blue triangle ) ( tiny blue triangle ) ( tiny blue triangle ) ( ? )"
        );
        assert!(render(Family::Ascending, Format::Text, &p)
            .starts_with("the first is a tiny blue triangle ,"));
    }

    #[test]
    fn vocabulary_is_small() {
        assert!(all_words().len() + 4 <= 64);
        for fam in [Family::Ascending, Family::Descending] {
            for fmt in [Format::Text, Format::Symbolic] {
                let s = render(
                    fam,
                    fmt,
                    &[Panel {
                        size: 1,
                        color: 1,
                        shape: 1,
                    }; 3],
                );
                for w in s.split_whitespace() {
                    assert!(all_words().contains(&w), "{w}");
                }
            }
        }
    }

    #[test]
    fn too_many_held_out_pairs() {
        let cfg = SynthConfig {
            held_out_pairs: 40,
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(Error::Generation(_))));
    }
}
