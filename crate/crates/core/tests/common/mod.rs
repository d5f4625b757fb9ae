//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rnes::corpus::{Document, Record, Vocabulary};

/// Documents whose sentences follow a hidden topic cycle: the topic of
/// sentence `i + 1` is always `succ(topic of sentence i)`. Each sentence
/// mixes two words of its topic with filler words shared by all topics, so
/// only the pairing of topics across sentences tells neighbours apart.
pub struct TopicChain {
    pub topics: usize,
    pub words_per_topic: usize,
    pub fillers: usize,
    succ: Vec<usize>,
}

impl TopicChain {
    pub fn new<R: Rng + ?Sized>(topics: usize, words_per_topic: usize, fillers: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..topics).collect();
        order.shuffle(rng);
        let mut succ = vec![0; topics];
        for i in 0..topics {
            succ[order[i]] = order[(i + 1) % topics];
        }
        TopicChain {
            topics,
            words_per_topic,
            fillers,
            succ,
        }
    }

    pub fn successor(&self, topic: usize) -> usize {
        self.succ[topic]
    }

    fn sentence<R: Rng + ?Sized>(&self, topic: usize, rng: &mut R) -> String {
        let mut words: Vec<String> = (0..2)
            .map(|_| format!("t{topic}w{}", rng.gen_range(0..self.words_per_topic)))
            .collect();
        words.extend((0..3).map(|_| format!("f{}", rng.gen_range(0..self.fillers))));
        words.shuffle(rng);
        words.join(" ")
    }

    pub fn records<R: Rng + ?Sized>(&self, docs: usize, sentences: usize, prefix: &str, rng: &mut R) -> Vec<Record> {
        (0..docs)
            .map(|d| {
                let mut topic = rng.gen_range(0..self.topics);
                let mut text = Vec::with_capacity(sentences);
                for _ in 0..sentences {
                    text.push(self.sentence(topic, rng));
                    topic = self.succ[topic];
                }
                Record {
                    id: format!("{prefix}{d}"),
                    highlights: vec![text[0].clone()],
                    sentences: text,
                }
            })
            .collect()
    }
}

/// Documents in which a few sentences carry the marker word `key`; the
/// highlights repeat exactly those sentences, so the oracle labels select
/// them.
pub fn marked_records<R: Rng + ?Sized>(docs: usize, words: usize, rng: &mut R) -> Vec<Record> {
    (0..docs)
        .map(|d| {
            let n = rng.gen_range(5..=8);
            let marked = rng.gen_range(1..=3);
            let mut slots: Vec<usize> = (0..n).collect();
            slots.shuffle(rng);
            let chosen = &slots[..marked];
            let sentences: Vec<String> = (0..n)
                .map(|i| {
                    let len = rng.gen_range(4..=7);
                    let mut ws: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..words))).collect();
                    if chosen.contains(&i) {
                        let at = rng.gen_range(0..=ws.len());
                        ws.insert(at, "key".to_string());
                    }
                    ws.join(" ")
                })
                .collect();
            let mut highlight_idx = chosen.to_vec();
            highlight_idx.sort_unstable();
            Record {
                id: format!("m{d}"),
                highlights: highlight_idx.iter().map(|&i| sentences[i].clone()).collect(),
                sentences,
            }
        })
        .collect()
}

/// Documents whose highlights are exactly their first three sentences.
pub fn lead_records<R: Rng + ?Sized>(docs: usize, rng: &mut R) -> Vec<Record> {
    (0..docs)
        .map(|d| {
            let n = rng.gen_range(3..=9);
            let sentences: Vec<String> = (0..n)
                .map(|_| {
                    let len = rng.gen_range(3..=8);
                    (0..len).map(|_| format!("x{}", rng.gen_range(0..40))).collect::<Vec<_>>().join(" ")
                })
                .collect();
            Record {
                id: format!("lead{d}"),
                highlights: sentences[..3].to_vec(),
                sentences,
            }
        })
        .collect()
}

pub fn encode(records: &[Record], vocab: &Vocabulary, max_len: usize) -> Vec<Document> {
    records
        .iter()
        .map(|r| Document::encode(r, vocab, max_len).expect("synthetic records encode"))
        .collect()
}
