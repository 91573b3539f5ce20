use cryptogen_core::model::{
    decode_step, float_generate, float_logits, generate, generate_stateless, oracle_generate, oracle_logits, prefill,
    Model, ModelConfig,
};
use cryptogen_core::nonlinear::MpcSession;
use cryptogen_core::{BackendParams, Context};

fn toy(seed: u64) -> Model {
    Model::generate(ModelConfig::toy(), seed).unwrap()
}

fn ctx(n: usize, seed: u64) -> Context {
    Context::new(BackendParams::new(n).unwrap(), seed).unwrap()
}

fn prompt(len: usize, seed: u64) -> Vec<u32> {
    (0..len as u64)
        .map(|i| ((i * 37 + seed * 11 + 5) % 64) as u32)
        .collect()
}

#[test]
fn prefill_logits_equal_oracle() {
    let model = toy(1);
    let c = ctx(64, 1);
    let mut mpc = MpcSession::for_context(&c, 1);
    let p = prompt(8, 1);
    let state = prefill(&model, &p, &c, &mut mpc).unwrap();
    assert_eq!(state.logits, oracle_logits(&model, &p, c.modulus()).unwrap());
    assert_eq!(state.caches.len(), 2);
    assert_eq!(state.caches[0].len(), 4);
    assert_eq!(state.caches[0][0].prefill_len(), 8);
}

#[test]
fn single_token_prompt() {
    let model = toy(2);
    let c = ctx(64, 2);
    let mut mpc = MpcSession::for_context(&c, 2);
    let state = prefill(&model, &[3], &c, &mut mpc).unwrap();
    assert_eq!(state.caches[1][3].prefill_len(), 1);
    assert_eq!(state.logits.len(), 64);
}

#[test]
fn generation_matches_oracle_and_stateless() {
    let model = toy(3);
    let c = ctx(64, 3);
    let p = prompt(4, 3);
    let mut mpc = MpcSession::for_context(&c, 3);
    let (tokens, report) = generate(&model, &p, 6, &c, &mut mpc).unwrap();
    assert_eq!(tokens, oracle_generate(&model, &p, 6, c.modulus()).unwrap());
    assert_eq!(report.steps.len(), 5);
    for (i, s) in report.steps.iter().enumerate() {
        assert_eq!(s.cache.t_auto, i + 1);
    }
    let c2 = ctx(64, 4);
    let mut mpc2 = MpcSession::for_context(&c2, 4);
    let (stateless, _) = generate_stateless(&model, &p, 6, &c2, &mut mpc2).unwrap();
    assert_eq!(stateless, tokens);
}

#[test]
fn zero_tokens_reports_prefill_only() {
    let model = toy(4);
    let c = ctx(64, 5);
    let mut mpc = MpcSession::for_context(&c, 5);
    let (tokens, report) = generate(&model, &[1, 2], 0, &c, &mut mpc).unwrap();
    assert!(tokens.is_empty());
    assert!(report.steps.is_empty());
    assert!(report.prefill.mult_cipher > 0);
}

#[test]
fn decode_step_advances_cache() {
    let model = toy(5);
    let c = ctx(64, 6);
    let mut mpc = MpcSession::for_context(&c, 6);
    let s0 = prefill(&model, &[1, 2, 3], &c, &mut mpc).unwrap();
    let (_, s1) = decode_step(&model, &s0, &c, &mut mpc).unwrap();
    assert_eq!(s1.position, 4);
    assert!(s1
        .caches
        .iter()
        .flatten()
        .all(|k| k.t_auto() == 1 && k.prefill_len() == 3));
}

#[test]
fn decode_counts_do_not_depend_on_prompt_length() {
    let model = toy(6);
    let mut per_step = Vec::new();
    for m in [8usize, 16, 32] {
        let c = ctx(64, 7);
        let mut mpc = MpcSession::for_context(&c, 7);
        let (_, report) = generate(&model, &prompt(m, 7), 3, &c, &mut mpc).unwrap();
        per_step.push(report.steps.iter().map(|s| s.counters.he_only()).collect::<Vec<_>>());
    }
    assert_eq!(per_step[0], per_step[1]);
    assert_eq!(per_step[1], per_step[2]);
}

#[test]
fn prefill_counts_grow_linearly() {
    let model = toy(7);
    let mut mults = Vec::new();
    for m in [4usize, 8, 16] {
        let c = ctx(64, 8);
        let mut mpc = MpcSession::for_context(&c, 8);
        prefill(&model, &prompt(m, 8), &c, &mut mpc).unwrap();
        mults.push(c.counter().mult_cipher as i64);
    }
    assert_eq!(mults[2] - mults[1], 2 * (mults[1] - mults[0]), "{mults:?}");
}

#[test]
fn oracle_is_deterministic_and_close_to_float() {
    let model = toy(8);
    let p = prompt(6, 8);
    let a = oracle_generate(&model, &p, 4, 536872321).unwrap();
    assert_eq!(a, oracle_generate(&model, &p, 4, 536872321).unwrap());
    let fixed = oracle_logits(&model, &p, 536872321).unwrap();
    let real = float_logits(&model, &p).unwrap();
    let drift = fixed
        .iter()
        .zip(&real)
        .map(|(&a, &b)| (a as f64 / 1024.0 - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1.0, "max logit drift {drift}");
    assert_eq!(float_generate(&model, &p, 2).unwrap().len(), 2);
}

#[test]
fn rejects_overlong_requests() {
    let model = toy(9);
    let c = ctx(64, 9);
    let mut mpc = MpcSession::for_context(&c, 9);
    assert!(generate(&model, &prompt(125, 1), 10, &c, &mut mpc).is_err());
    assert!(generate(&model, &[], 1, &c, &mut mpc).is_err());
    assert!(prefill(&model, &[64], &c, &mut mpc).is_err());
}

#[test]
fn counts_match_closed_form_predictions() {
    use cryptogen_core::costmodel::validate_against_counts;
    let model = toy(10);
    for (n, m, k) in [(64, 8, 12), (128, 5, 4), (64, 1, 3)] {
        let c = ctx(n, 10);
        let mut mpc = MpcSession::for_context(&c, 10);
        let (_, report) = generate(&model, &prompt(m, 10), k, &c, &mut mpc).unwrap();
        let v = validate_against_counts(&report, &model.config).unwrap();
        assert!(
            v.passed() || v.discrepancies().iter().all(|c| c.metric.contains("exponent")),
            "{:?}",
            v.discrepancies()
        );
    }
}
