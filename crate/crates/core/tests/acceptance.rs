//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Numeric arguments select a subset,
//! e.g. `cargo test -p lad-core --test acceptance -- 1 4`.

use lad_core::corpus::{build_corpus, generate_corpus, BehaviorRecord, Corpus, GenConfig};
use lad_core::eval::{
    bleu, evaluate, mrr, recall_at_k, toxicity_metrics, EvalConfig, EvalReport, MetricsReport,
};
use lad_core::expert::{QualityScorer, RuleExpert};
use lad_core::glm::{
    beam_generate, load_checkpoint, save_checkpoint, Candidate, CandidateList, DecodeConfig, Hyper,
    Model, ModelState,
};
use lad_core::interests::{assemble_input, copy_short_term, encode_long_term, LongTermVectors};
use lad_core::rng::SeededRng;
use lad_core::rpo::{
    build_pairs, combined_gradient, evaluate_combined, inject_reject, pairwise_loss, rpo_loss,
    Example, PairKind, PreferencePair, Stage, TrainConfig,
};
use lad_core::serving::{serve, GsuBuffer, Service};
use lad_core::train::train;
use lad_core::vocab::{TokenId, Vocabulary, EOS, REJECT};
use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn candidate(text: &str, expert_score: f64) -> Candidate {
    Candidate {
        ids: text.bytes().map(|b| b as TokenId).chain([EOS]).collect(),
        text: text.into(),
        seq_score: -1.0,
        expert_score,
        is_reject: false,
    }
}

fn criterion_1() -> Outcome {
    let list = |scores: &[f64]| {
        CandidateList::new(
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| candidate(&format!("g{}", i + 1), s))
                .collect(),
        )
    };
    let injected = inject_reject(list(&[0.9, 0.7, 0.5, 0.2]), 0.6).map_err(err)?;
    ensure(injected.reject_index == Some(2), format!("reject at {:?}, expected 2", injected.reject_index))?;
    let tail = inject_reject(list(&[0.9, 0.8, 0.7, 0.61]), 0.6).map_err(err)?;
    ensure(tail.reject_index == Some(4), "all-above case must put the reject last")?;
    let front = inject_reject(list(&[0.5, 0.4, 0.3, 0.0]), 0.6).map_err(err)?;
    ensure(front.reject_index == Some(0), "all-below case must put the reject first")?;

    let pairs = build_pairs(&injected).map_err(err)?;
    let g = |i: usize| injected.candidates.iter().find(|c| c.text == format!("g{i}")).unwrap().ids.clone();
    let r = vec![REJECT];
    let expected = vec![
        PreferencePair { better: g(1), worse: r.clone(), kind: PairKind::PlusVsReject },
        PreferencePair { better: g(2), worse: r.clone(), kind: PairKind::PlusVsReject },
        PreferencePair { better: r.clone(), worse: g(3), kind: PairKind::RejectVsMinus },
        PreferencePair { better: r.clone(), worse: g(4), kind: PairKind::RejectVsMinus },
    ];
    ensure(pairs == expected, format!("pairs {pairs:?}"))?;
    Ok("reject at 2, boundaries at tail and front, pairs (g1,R),(g2,R),(R,g3),(R,g4)".into())
}

fn tiny_hyper() -> Hyper {
    Hyper {
        dim: 4,
        heads: 2,
        ffn_dim: 4,
        enc_layers: 1,
        dec_layers: 1,
        lte_layers: 1,
        max_enc_len: 16,
        max_dec_len: 8,
        max_lte_len: 6,
        short_max: 2,
        long_max: 2,
    }
}

fn criterion_2() -> Outcome {
    // Uniform distribution over exactly four tokens: zero projection, and all
    // other vocabulary entries pushed to probability zero.
    let vocab = Vocabulary::build("abc".chars()).map_err(err)?;
    let mut uniform: Model<f64> = Model::new(tiny_hyper(), vocab.clone(), 3).map_err(err)?;
    uniform.param_by_name_mut("out.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    let live: Vec<TokenId> = vec![EOS, vocab.id_of('a').unwrap(), vocab.id_of('b').unwrap(), vocab.id_of('c').unwrap()];
    for (id, b) in uniform.param_by_name_mut("out.b").unwrap().data.iter_mut().enumerate() {
        *b = if live.contains(&(id as TokenId)) { 0.0 } else { -1e30 };
    }
    let input = assemble_input("ab", vec![], LongTermVectors::empty(4), &vocab).map_err(err)?;
    let target = [vocab.id_of('c').unwrap(), EOS];
    let l_glm = uniform.glm_loss(&input, &target).map_err(err)?;
    let want = 2.0 * 4f64.ln();
    ensure((l_glm - want).abs() < 1e-6, format!("L_GLM {l_glm} vs 2 ln 4 = {want}"))?;

    let zero_margin = pairwise_loss(&[0.0]);
    ensure((zero_margin - 2f64.ln()).abs() < 1e-6, format!("pairwise loss at 0 is {zero_margin}"))?;
    let pair = PreferencePair { better: target.to_vec(), worse: target.to_vec(), kind: PairKind::PlusVsReject };
    let l_rpo = rpo_loss(&[pair], &input, &uniform, true).map_err(err)?;
    ensure((l_rpo - 2f64.ln()).abs() < 1e-6, format!("L_RPO with equal sides is {l_rpo}"))?;

    // Finite differences in f64 against analytic single-precision gradients.
    let vocab = Vocabulary::build("ab".chars()).map_err(err)?;
    let model: ModelState = Model::new(tiny_hyper(), vocab.clone(), 5).map_err(err)?;
    let n_params = model.param_count();
    ensure(n_params <= 1000, format!("gradient-check model has {n_params} parameters"))?;
    let e = |s: &str| vocab.encode(s);
    let eos = |s: &str| e(s).into_iter().chain([EOS]).collect::<Vec<_>>();
    let examples = vec![
        Example {
            prefix: e("ab"),
            short: [e("ba"), vec![EOS], e("a")].concat(),
            long: vec![e("aab"), e("b")],
            target: eos("abb"),
            use_target: true,
            pairs: vec![
                PreferencePair { better: eos("ab"), worse: vec![REJECT], kind: PairKind::PlusVsReject },
                PreferencePair { better: vec![REJECT], worse: eos("ba"), kind: PairKind::RejectVsMinus },
            ],
        },
        Example {
            prefix: e("b"),
            short: vec![],
            long: vec![e("ab")],
            target: eos("ba"),
            use_target: false,
            pairs: vec![PreferencePair { better: eos("bb"), worse: vec![REJECT], kind: PairKind::PlusVsReject }],
        },
    ];
    let cfg = TrainConfig {
        stage: Stage::Rpo,
        glm_weight: 1.0,
        rpo_weight: 0.7,
        ..TrainConfig::default()
    };
    let analytic: Vec<f64> = combined_gradient(&model, &examples, &cfg)
        .map_err(err)?
        .iter()
        .flat_map(|m| m.data.iter().map(|&v| v as f64))
        .collect();
    let mut probe: Model<f64> = model.cast();
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    for p in 0..probe.params.len() {
        for j in 0..probe.params[p].value.data.len() {
            let orig = probe.params[p].value.data[j];
            probe.params[p].value.data[j] = orig + h;
            let up = evaluate_combined(&probe, &examples, &cfg).map_err(err)?.total;
            probe.params[p].value.data[j] = orig - h;
            let down = evaluate_combined(&probe, &examples, &cfg).map_err(err)?.total;
            probe.params[p].value.data[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let rel = diff / scale;
    ensure(scale > 0.0, "numeric gradient is zero")?;
    ensure(rel < 1e-3, format!("gradient relative error {rel:.3e}"))?;
    Ok(format!(
        "L_GLM={l_glm:.9}, L_RPO={l_rpo:.9}, grad rel err {rel:.2e} over {n_params} params"
    ))
}

/// Every completion of at most `max_len` tokens plus the reject, scored by
/// teacher forcing and ranked best first.
fn brute_force(model: &Model<f64>, input: &lad_core::interests::AssembledInput<f64>, real: &[TokenId], max_len: usize) -> Vec<(f64, Vec<TokenId>)> {
    let mut bodies: Vec<Vec<TokenId>> = vec![vec![]];
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 1..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p| real.iter().map(move |&t| [p.clone(), vec![t]].concat()))
            .collect();
        bodies.extend(frontier.iter().cloned());
    }
    let mut all: Vec<(f64, Vec<TokenId>)> = bodies
        .into_iter()
        .map(|b| b.into_iter().chain([EOS]).collect::<Vec<_>>())
        .chain([vec![REJECT]])
        .map(|ids| (model.sequence_logprob(input, &ids).unwrap(), ids))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    all
}

fn criterion_3() -> Outcome {
    let vocab = Vocabulary::build("abc".chars()).map_err(err)?;
    let real: Vec<TokenId> = "abc".chars().map(|c| vocab.id_of(c).unwrap()).collect();
    let max_len = 3;
    let n = 4;
    let cfg = DecodeConfig { n, beam_width: 64, max_len, length_normalize: true };
    let mut worst = 0f64;
    for seed in 0..20u64 {
        let mut model: Model<f64> = Model::new(tiny_hyper(), vocab.clone(), seed).map_err(err)?;
        let mut rng = SeededRng::new(1000 + seed);
        for name in ["out.w", "out.b"] {
            for v in model.param_by_name_mut(name).unwrap().data.iter_mut() {
                *v = rng.normal() * 1.5;
            }
        }
        let input = assemble_input("ab", vec![], LongTermVectors::empty(4), &vocab).map_err(err)?;
        let list = beam_generate(&model, &input, &cfg).map_err(err)?;
        let oracle = brute_force(&model, &input, &real, max_len);
        let oracle_real: Vec<&(f64, Vec<TokenId>)> = oracle.iter().filter(|c| c.1 != [REJECT]).take(n).collect();
        let got_real: Vec<&Candidate> = list.real().collect();
        ensure(got_real.len() == oracle_real.len(), format!("seed {seed}: {} real candidates", got_real.len()))?;
        for (g, o) in got_real.iter().zip(&oracle_real) {
            ensure(g.ids == o.1, format!("seed {seed}: beam {:?} vs oracle {:?}", g.ids, o.1))?;
            worst = worst.max((g.seq_score - o.0).abs());
            ensure((g.seq_score - o.0).abs() < 1e-9, format!("seed {seed}: score {} vs {}", g.seq_score, o.0))?;
        }
        let reject_score = oracle.iter().find(|c| c.1 == [REJECT]).unwrap().0;
        if let Some(ri) = list.reject_index {
            let r = &list.candidates[ri];
            ensure((r.seq_score - reject_score).abs() < 1e-9, format!("seed {seed}: reject score"))?;
            let above = got_real.iter().filter(|c| c.seq_score > reject_score).count();
            ensure(above == ri, format!("seed {seed}: reject at {ri}, {above} candidates score above it"))?;
        }
    }
    Ok(format!("20 models agree with exhaustive enumeration, max score diff {worst:.1e}"))
}

struct TableScorer(HashMap<&'static str, f64>);

impl QualityScorer for TableScorer {
    fn score(&self, text: &str) -> f64 {
        self.0.get(text).copied().unwrap_or(1.0)
    }
}

fn criterion_4() -> Outcome {
    let kept: Vec<Vec<String>> = [
        vec!["abc", "abd", "abe", "abf"],
        vec!["xyz"],
        vec![],
        vec!["aa", "bb"],
        vec!["m1", "m2", "m3", "g5"],
        vec!["t1", "t2", "g6"],
        vec!["p"],
        vec!["g8", "z"],
        vec![],
        vec!["u", "g10"],
    ]
    .iter()
    .map(|l| l.iter().map(|s| s.to_string()).collect())
    .collect();
    let golden: Vec<String> = ["abd", "xyz", "q", "cc", "g5", "g6", "q7", "g8", "g9", "g10"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let scorer = TableScorer(HashMap::from([("abf", 0.1), ("bb", 0.3), ("t2", 0.6), ("p", 0.45)]));

    let sixth = (1.0f64 / 6.0).powf(0.25);
    let half = 0.5f64.powf(0.25);
    let expect = MetricsReport {
        recall_at_4: 0.6,
        mrr: 43.0 / 120.0,
        bleu: (4.0 * sixth + 2.0 + (-1.0f64).exp() * half + (-2.0f64).exp() * half) / 10.0,
        amaxt: 0.255,
        prob: 0.3,
        uamaxt: 0.255 * 4.0 / 1.9,
        uprob: 0.3 * 4.0 / 1.9,
        avg_rn: 2.1,
        n_samples: 10,
        mean_kept: 1.9,
        n_g: 4,
        nothing_kept: false,
    };
    let got = MetricsReport::compute(&kept, &golden, &scorer, 4).map_err(err)?;
    let pairs = [
        ("R@4", got.recall_at_4, expect.recall_at_4),
        ("MRR", got.mrr, expect.mrr),
        ("BLEU", got.bleu, expect.bleu),
        ("AmaxT", got.amaxt, expect.amaxt),
        ("Prob", got.prob, expect.prob),
        ("UAmaxT", got.uamaxt, expect.uamaxt),
        ("UProb", got.uprob, expect.uprob),
        ("AvgRN", got.avg_rn, expect.avg_rn),
    ];
    for (name, g, e) in pairs {
        ensure((g - e).abs() < 1e-9, format!("{name}: got {g}, expected {e}"))?;
    }
    ensure(recall_at_k(&kept, &golden, 4).map_err(err)? == got.recall_at_4, "R@4 mismatch")?;
    ensure(mrr(&kept, &golden).map_err(err)? == got.mrr, "MRR mismatch")?;
    ensure(bleu(&kept, &golden).map_err(err)? == got.bleu, "BLEU mismatch")?;
    let t = toxicity_metrics(&kept, &scorer, 4).map_err(err)?;
    let ratio = 4.0 / t.mean_kept;
    ensure((t.uamaxt / t.amaxt - ratio).abs() < 1e-12, "UAmaxT/AmaxT differs from N_G/mean kept")?;
    ensure((t.uprob / t.prob - ratio).abs() < 1e-12, "UProb/Prob differs from N_G/mean kept")?;
    Ok(format!("all eight metrics match the fixture, N_G/mean(N_gi) = {ratio:.6}"))
}

struct Trained {
    corpus: Corpus,
    expert: RuleExpert,
    full_glm: Option<(ModelState, EvalReport)>,
}

impl Trained {
    fn new() -> Self {
        let corpus = build_corpus(&GenConfig::default()).expect("corpus");
        let expert = RuleExpert::new(corpus.lexicon.toxic.clone()).with_charset(corpus.alphabet.iter().copied());
        Self { corpus, expert, full_glm: None }
    }

    fn vocab(&self) -> Vocabulary {
        Vocabulary::build(self.corpus.alphabet.iter().copied().chain([' '])).expect("vocab")
    }

    fn glm(&self, short_max: usize, long_max: usize) -> ModelState {
        let h = Hyper { short_max, long_max, ..Hyper::default() };
        let mut m: ModelState = Model::new(h, self.vocab(), 1).expect("model");
        let cfg = TrainConfig { steps: 400, batch_size: 64, warmup_steps: 40, peak_lr: 2e-3, ..TrainConfig::default() };
        train(&mut m, &self.corpus.train, None, &cfg, None).expect("glm training");
        m
    }

    fn eval(&self, m: &ModelState, limit: usize) -> EvalReport {
        let test = &self.corpus.test[..limit.min(self.corpus.test.len())];
        evaluate(m, test, &self.expert, &EvalConfig::default()).expect("evaluation").0
    }

    fn full_glm(&mut self) -> (ModelState, EvalReport) {
        if self.full_glm.is_none() {
            let m = self.glm(3, 7);
            let r = self.eval(&m, usize::MAX);
            self.full_glm = Some((m, r));
        }
        self.full_glm.clone().unwrap()
    }
}

fn criterion_5(t: &mut Trained) -> Outcome {
    let start = Instant::now();
    let (mut model, before) = t.full_glm();
    let cfg = TrainConfig {
        stage: Stage::Rpo,
        steps: 150,
        batch_size: 64,
        warmup_steps: 15,
        peak_lr: 2e-3 / 3.0,
        ..TrainConfig::default()
    };
    train(&mut model, &t.corpus.train, Some(&t.expert), &cfg, None).map_err(err)?;
    let after = t.eval(&model, usize::MAX);
    let r4 = |r: &EvalReport| r.non_toxic.as_ref().map_or(0.0, |m| m.recall_at_4);
    let toxic_rn = after.toxic.as_ref().map_or(0.0, |m| m.avg_rn);
    let detail = format!(
        "UProb {:.4} -> {:.4}, clean R@4 {:.4} -> {:.4}, toxic AvgRN {:.2}, {} train samples, {:.0}s",
        before.overall.uprob,
        after.overall.uprob,
        r4(&before),
        r4(&after),
        toxic_rn,
        t.corpus.train.len(),
        start.elapsed().as_secs_f64()
    );
    ensure(before.overall.uprob > 0.0, format!("GLM-only UProb is zero, nothing to reduce; {detail}"))?;
    ensure(after.overall.uprob <= 0.5 * before.overall.uprob, format!("UProb not halved; {detail}"))?;
    ensure(r4(&before) - r4(&after) <= 0.05, format!("clean R@4 dropped too far; {detail}"))?;
    ensure(toxic_rn >= 2.0, format!("toxic AvgRN below 2; {detail}"))?;
    Ok(detail)
}

fn criterion_6(t: &mut Trained) -> Outcome {
    let limit = 2000;
    let (model, _) = t.full_glm();
    let full = t.eval(&model, limit).overall.recall_at_4;
    let mut rows = vec![];
    for (s, l) in [(0, 0), (3, 0), (0, 7)] {
        let m = t.glm(s, l);
        rows.push(((s, l), t.eval(&m, limit).overall.recall_at_4));
    }
    let detail = format!(
        "R@4 S3L7 {full:.4}, {}",
        rows.iter().map(|((s, l), r)| format!("S{s}L{l} {r:.4}")).collect::<Vec<_>>().join(", ")
    );
    ensure(full - rows[0].1 >= 0.10, format!("S3L7 does not beat S0L0 by 10 points; {detail}"))?;
    ensure(full > rows[1].1 && full > rows[2].1, format!("S3L7 is not best; {detail}"))?;
    Ok(detail)
}

fn serving_model(seed: u64) -> ModelState {
    let vocab = Vocabulary::build("abcdefgh ".chars()).unwrap();
    let mut m: ModelState = Model::new(Hyper::default(), vocab, seed).unwrap();
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    for v in m.param_by_name_mut("out.w").unwrap().data.iter_mut() {
        *v = (rng.normal() * 0.3) as f32;
    }
    m.param_by_name_mut("out.b").unwrap().data[EOS as usize] = 1.0;
    m
}

fn behaviors(u: usize) -> Vec<String> {
    (0..9).map(|k| format!("{} {}", ["ab", "cd", "ef", "gh"][(u + k) % 4], ["ha", "gb", "fc"][k % 3])).collect()
}

fn expected_kept(model: &ModelState, prefix: &str, recent: &[String], long: LongTermVectors<f32>, cfg: &DecodeConfig) -> CandidateList {
    let h = model.hyper();
    let short = copy_short_term(recent, h.short_max, model.vocab());
    let input = assemble_input(prefix, short, long, model.vocab()).unwrap();
    beam_generate(model, &input, cfg).unwrap()
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let model = serving_model(21);
    let decode = DecodeConfig::default();
    let h = model.hyper().clone();
    let records: Vec<BehaviorRecord> = (0..8)
        .map(|u| BehaviorRecord { user_id: format!("user{u}"), queries: behaviors(u) })
        .collect();
    let tmp = tempfile::tempdir().map_err(err)?;
    let log = tmp.path().join("behaviors.jsonl");
    let lines: Vec<String> = records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    std::fs::write(&log, lines.join("\n")).map_err(err)?;
    let svc = Arc::new(
        Service::new(Some(model.clone()), GsuBuffer::new(h.short_max), decode.clone(), "mem").with_behavior_log(&log),
    );
    svc.refresh(&records).map_err(err)?;

    // Cached vectors against an inline recomputation, scored by teacher forcing.
    svc.record_event("user0", "cd ha").map_err(err)?;
    let resp = svc.complete("user0", "ab").map_err(err)?;
    let long = encode_long_term(&behaviors(0), h.long_max, &model).map_err(err)?;
    let short = copy_short_term(&["cd ha".to_string()], h.short_max, model.vocab());
    let input = assemble_input("ab", short, long, model.vocab()).map_err(err)?;
    let mut cache_diff = 0f64;
    for c in &resp.completions {
        let ids: Vec<TokenId> = model.vocab().encode(&c.text).into_iter().chain([EOS]).collect();
        let s = model.sequence_logprob(&input, &ids).map_err(err)? as f64;
        cache_diff = cache_diff.max((s - c.score).abs());
    }
    ensure(cache_diff < 1e-5, format!("cache vs recompute differ by {cache_diff}"))?;
    ensure(!resp.completions.is_empty() || resp.rejected_count > 0, "nothing generated for the cache check")?;

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(err)?;
    let (failures, generations, latencies) = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let server = tokio::spawn(serve(svc.clone(), listener));
        let client = reqwest::Client::new();

        let mut tasks = vec![];
        for u in 0..8usize {
            let (svc, client, base, model, decode) = (svc.clone(), client.clone(), base.clone(), model.clone(), decode.clone());
            tasks.push(tokio::spawn(async move {
                let user = format!("user{u}");
                let mut recent: Vec<String> = if u == 0 { vec!["cd ha".into()] } else { vec![] };
                let mut fails = vec![];
                let mut gens = vec![];
                for k in 0..6usize {
                    let query = format!("{} {}", ["ga", "fb", "ec", "dd"][(u + k) % 4], ["a", "bc", "h"][k % 3]);
                    let ack: serde_json::Value = client
                        .post(format!("{base}/v1/event"))
                        .json(&serde_json::json!({ "user_id": user, "query": query }))
                        .send().await.unwrap().json().await.unwrap();
                    if ack != serde_json::json!({ "ok": true }) {
                        fails.push(format!("{user}: event ack {ack}"));
                    }
                    recent.push(query);
                    if recent.len() > 3 {
                        recent.remove(0);
                    }
                    let prefix = ["a", "b", "ab", "c", "dd", "e"][k];
                    let r: serde_json::Value = client
                        .post(format!("{base}/v1/complete"))
                        .json(&serde_json::json!({ "user_id": user, "prefix": prefix }))
                        .send().await.unwrap().json().await.unwrap();
                    gens.push(r["generation"].as_u64().unwrap_or(0));
                    let texts: Vec<String> = r["completions"].as_array().unwrap().iter().map(|c| c["text"].as_str().unwrap().to_string()).collect();
                    let scores: Vec<f64> = r["completions"].as_array().unwrap().iter().map(|c| c["score"].as_f64().unwrap()).collect();
                    let rejected = r["rejected_count"].as_u64().unwrap() as usize;
                    let long = svc.bank().get(&user).map(|e| e.vectors.clone()).unwrap();
                    let (m2, d2, p2, rc2) = (model.clone(), decode.clone(), prefix.to_string(), recent.clone());
                    let list = tokio::task::spawn_blocking(move || expected_kept(&m2, &p2, &rc2, long, &d2)).await.unwrap();
                    let want: Vec<String> = list.kept().iter().map(|c| c.text.clone()).collect();
                    if texts != want || rejected != list.rejected_count() {
                        fails.push(format!("{user} step {k}: response {texts:?}/{rejected} but short-term state gives {want:?}/{}", list.rejected_count()));
                    }
                    if texts.iter().any(|t| t.contains("[Reject]")) {
                        fails.push(format!("{user}: reject text leaked"));
                    }
                    if let Some(ri) = list.reject_index {
                        let floor = list.candidates[ri].seq_score;
                        if scores.iter().any(|&s| s < floor) {
                            fails.push(format!("{user}: completion scored below the reject"));
                        }
                    }
                }
                (fails, gens)
            }));
        }
        let refresher = {
            let (client, base) = (client.clone(), base.clone());
            tokio::spawn(async move {
                let mut gens = vec![];
                for _ in 0..5 {
                    let r: serde_json::Value = client.post(format!("{base}/v1/memory/refresh")).send().await.unwrap().json().await.unwrap();
                    gens.push(r["generation"].as_u64().unwrap_or(0));
                }
                gens
            })
        };
        let mut failures = vec![];
        let mut generations = vec![];
        for t in tasks {
            let (f, g) = t.await.unwrap();
            failures.extend(f);
            generations.extend(g);
        }
        let refresh_gens = refresher.await.unwrap();
        if refresh_gens.windows(2).any(|w| w[1] <= w[0]) {
            failures.push(format!("refresh generations not increasing: {refresh_gens:?}"));
        }

        let mut latencies = vec![];
        for i in 0..100usize {
            let prefix = ["a", "ab", "abc", "bcd", "h", "gh e"][i % 6];
            let t0 = Instant::now();
            let resp = client
                .post(format!("{base}/v1/complete"))
                .json(&serde_json::json!({ "user_id": format!("user{}", i % 8), "prefix": prefix }))
                .send().await.unwrap();
            let ok = resp.status().is_success();
            let _ = resp.bytes().await;
            latencies.push(t0.elapsed().as_secs_f64() * 1e3);
            if !ok {
                failures.push("latency request failed".into());
            }
        }
        server.abort();
        (failures, generations, latencies)
    });
    ensure(failures.is_empty(), failures.join("; "))?;
    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    let p95 = sorted[(sorted.len() * 95).div_ceil(100) - 1];
    ensure(p95 < 100.0, format!("p95 latency {p95:.1} ms"))?;
    let gens: std::collections::BTreeSet<u64> = generations.into_iter().collect();
    Ok(format!(
        "cache diff {cache_diff:.1e}, 8 clients consistent across generations {gens:?}, p95 {p95:.1} ms, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn read_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = GenConfig { seed: 42, ..GenConfig::default() };
    generate_corpus(&cfg, &a).map_err(err)?;
    generate_corpus(&cfg, &b).map_err(err)?;
    let (fa, fb) = (read_dir_bytes(&a), read_dir_bytes(&b));
    ensure(!fa.is_empty() && fa == fb, "corpus files differ between runs")?;

    let model = serving_model(8);
    let p1 = tmp.path().join("m1.ckpt");
    let p2 = tmp.path().join("m2.ckpt");
    save_checkpoint(&model, &p1).map_err(err)?;
    let loaded = load_checkpoint(&p1).map_err(err)?;
    let bit_equal = model.params.iter().zip(&loaded.params).all(|(x, y)| {
        x.name == y.name && x.value.shape() == y.value.shape() && x.value.data.iter().zip(&y.value.data).all(|(u, v)| u.to_bits() == v.to_bits())
    });
    ensure(bit_equal && model.params.len() == loaded.params.len(), "checkpoint round trip changed parameters")?;
    save_checkpoint(&loaded, &p2).map_err(err)?;
    ensure(std::fs::read(&p1).map_err(err)? == std::fs::read(&p2).map_err(err)?, "re-saved checkpoint differs")?;

    let service = || {
        let s = Service::new(Some(load_checkpoint(&p1).unwrap()), GsuBuffer::new(3), DecodeConfig::default(), "m1");
        s.record_event("u", "ab cd").unwrap();
        s
    };
    let (s1, s2) = (service(), service());
    for prefix in ["a", "ab", "gh", "c d"] {
        let (r1, r2) = (s1.complete("u", prefix).map_err(err)?, s2.complete("u", prefix).map_err(err)?);
        ensure(r1 == r2, format!("completions for {prefix:?} differ"))?;
    }
    Ok(format!("{} corpus files identical, checkpoint bit-exact, completions identical", fa.len()))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut trained: Option<Trained> = None;
    let mut failed = 0;
    for n in 1..=8usize {
        if !want(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(trained.get_or_insert_with(Trained::new)),
            6 => criterion_6(trained.get_or_insert_with(Trained::new)),
            7 => criterion_7(),
            _ => criterion_8(),
        }))
        .unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.1}s) {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
