use std::sync::OnceLock;

use policyprobe_core::data::LabeledExample;
use policyprobe_core::scorer::{answer_ids, Scorer, ScorerConfig};
use policyprobe_core::synth::{desk_prompt, synth_dataset, SynthConfig};
use policyprobe_core::tuner::{tune, TuneConfig};
use policyprobe_core::FrozenModel;
use proptest::prelude::*;

fn model() -> &'static FrozenModel {
    static M: OnceLock<FrozenModel> = OnceLock::new();
    M.get_or_init(|| policyprobe::fixture::load().unwrap().0)
}

fn held_out(n: usize) -> Vec<LabeledExample> {
    synth_dataset(n, 4242, &SynthConfig::default()).unwrap()
}

#[test]
fn exemplar_comments_get_their_own_answers() {
    let prompt = desk_prompt();
    let scorer = Scorer::new(model(), None, &prompt, ScorerConfig::default()).unwrap();
    for e in &prompt.exemplars {
        let c = scorer.classify(&e.comment).unwrap();
        assert_eq!(c.parsed.answer.answer(), Some(e.answer), "{}", c.generation);
        assert_eq!(c.score.answer, e.answer);
        assert_eq!(c.parsed.keywords, e.keywords);
        assert!(c.grounding.fully_grounded);
    }
}

#[test]
fn tuned_prompts_keep_explanations() {
    let train = synth_dataset(50, 77, &SynthConfig::default()).unwrap();
    let test = held_out(100);
    let prompt = desk_prompt();

    let config = TuneConfig { seed: 1, ..TuneConfig::default() };
    let (soft, _) = tune(model(), &prompt, &train, &[], &config, None).unwrap();
    let scorer = Scorer::new(model(), Some(&soft), &prompt, ScorerConfig { max_new_tokens: 96, include_hard_prompt: true }).unwrap();
    let parsed = test.iter().filter(|e| scorer.classify(&e.comment).unwrap().parsed.answer.answer().is_some()).count();
    assert!(parsed >= 95, "{parsed}/100 parseable after tuning");

    // Without the hard prompt only the answer token is expected.
    let config = TuneConfig { include_hard_prompt: false, ..config };
    let (bare, _) = tune(model(), &prompt, &train, &[], &config, None).unwrap();
    let scorer = Scorer::new(model(), Some(&bare), &prompt, ScorerConfig { max_new_tokens: 0, include_hard_prompt: false }).unwrap();
    let (yes, no) = answer_ids(model()).unwrap();
    let answered = test
        .iter()
        .filter(|e| {
            let d = scorer.distribution(&e.comment).unwrap();
            let top = d.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as u32;
            top == yes || top == no
        })
        .count();
    assert!(answered >= 95, "{answered}/100 answer tokens without the hard prompt");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    // Lexicon labels are separable by phrase presence.
    #[test]
    fn tuning_lowers_the_epoch_loss(seed in 0u64..10_000, n in 50usize..70) {
        let train = synth_dataset(n, seed, &SynthConfig::default()).unwrap();
        let steps = 6 * n.div_ceil(8);
        let config = TuneConfig { learning_rate: 0.05, batch_size: 8, steps, n_prefix: 4, seed, ..TuneConfig::default() };
        let (_, log) = tune(model(), &desk_prompt(), &train, &[], &config, None).unwrap();
        let means = log.epoch_means();
        prop_assert_eq!(means.len(), 6);
        prop_assert!(means[5] < means[0], "{:?}", means);
    }
}
