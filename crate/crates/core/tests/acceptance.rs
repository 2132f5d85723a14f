//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (outside the test harness capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use styleknn::base_lm::{
    loss_and_gradient, train_lm, Example, LanguageModel, LmConfig, LmParameters,
};
use styleknn::corpus::{
    generate_synthetic_corpus, split_documents, tokenize_records, write_jsonl, Document, Split,
    StyleTaxonomy, Vocabulary,
};
use styleknn::datastore::{build_ivf, recall_at_k, to_query, Datastore, DistanceKind, IvfIndex};
use styleknn::evaluation::{
    compare_models, default_lambda_grid, prompts_from_documents, run_ablation,
    style_similarity_heatmap, AblationInputs, AblationRow, AblationSpec, EvalReport, WeightSource,
};
use styleknn::knn_lm::{
    Decode, GenerationRecord, GenerationRequest, KnnLm, KnnLmConfig, Retrieval,
};
use styleknn::locality::{
    cache_neighbors, knn_locality_distribution, locality_loss_and_gradient, AnnotatedSample,
    CachedSample, Feature, LocalityFeatureSet, LocalityHyper, LocalityTrainOutcome,
    LocalityWeights,
};

fn report(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance {id:>2}] {status} {name}: {}",
        detail.as_ref()
    );
}

// ---------------------------------------------------------------------------
// shared fixtures

struct Pipeline {
    taxonomy: StyleTaxonomy,
    vocab: Vocabulary,
    train: Vec<Document>,
    valid: Vec<Document>,
    test: Vec<Document>,
    params: LmParameters,
    store: Datastore,
    build_time: Duration,
}

fn build_pipeline(taxonomy: StyleTaxonomy, docs_per_style: usize, seed: u64) -> Pipeline {
    let start = Instant::now();
    let records = generate_synthetic_corpus(&taxonomy, docs_per_style, seed);
    let vocab = Vocabulary::build(&records, 1).unwrap();
    let docs = tokenize_records(&records, &vocab);
    let train = split_documents(&docs, Split::Train);
    let valid = split_documents(&docs, Split::Valid);
    let test = split_documents(&docs, Split::Test);
    let mut cfg = LmConfig::desk(vocab.len());
    cfg.seed = seed;
    let params = train_lm(cfg, &train, &valid).unwrap().params;
    let store =
        Datastore::from_documents(&params, &train, &taxonomy, DistanceKind::SquaredL2).unwrap();
    Pipeline {
        taxonomy,
        vocab,
        train,
        valid,
        test,
        params,
        store,
        build_time: start.elapsed(),
    }
}

/// Two styles in two categories with one source each, 350 documents per
/// style.
fn two_style() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| build_pipeline(StyleTaxonomy::synthetic(2, 1, 2), 350, 11))
}

struct Ablation {
    rows: Vec<AblationRow>,
    time: Duration,
}

fn two_style_ablation() -> &'static Ablation {
    static A: OnceLock<Ablation> = OnceLock::new();
    A.get_or_init(|| {
        let p = two_style();
        let start = Instant::now();
        let sample = AnnotatedSample::from_documents(&p.train, 3000, 5);
        let grid = default_lambda_grid();
        let inputs = AblationInputs {
            store: &p.store,
            ivf: None,
            model: &p.params,
            taxonomy: &p.taxonomy,
            valid: &p.valid,
            test: &p.test,
            k: 64,
            distance: DistanceKind::SquaredL2,
            retrieval: Retrieval::Exact,
            lambda_grid: &grid,
            weights: WeightSource::Train {
                sample: &sample,
                hyper: LocalityHyper::default(),
            },
        };
        let rows = run_ablation(&AblationSpec::default(), &inputs).unwrap();
        Ablation {
            rows,
            time: start.elapsed(),
        }
    })
}

fn row<'a>(rows: &'a [AblationRow], features: &[Feature]) -> &'a AblationRow {
    let f = LocalityFeatureSet::of(features);
    rows.iter().find(|r| r.features == f).unwrap()
}

fn weights_of(r: &AblationRow) -> LocalityWeights {
    LocalityWeights::from_scales(r.features, r.scales.values().copied().collect()).unwrap()
}

fn random_store(n: usize, d: usize, seed: u64, taxonomy: &StyleTaxonomy) -> Datastore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let values = (0..n).map(|_| rng.gen_range(3..20)).collect();
    let n_styles = taxonomy.styles().len() as u16;
    let n_sources = taxonomy.sources().len() as u16;
    let localities = (0..n)
        .map(|_| {
            taxonomy
                .descriptor(rng.gen_range(0..n_styles), rng.gen_range(0..n_sources))
                .unwrap()
        })
        .collect();
    Datastore::from_entries(
        d,
        &keys,
        values,
        localities,
        DistanceKind::SquaredL2,
        taxonomy.fingerprint(),
    )
    .unwrap()
}

fn all_feature_sets() -> Vec<LocalityFeatureSet> {
    (0..8)
        .map(|b| LocalityFeatureSet {
            style: b & 1 != 0,
            source: b & 2 != 0,
            category: b & 4 != 0,
        })
        .collect()
}

// ---------------------------------------------------------------------------

#[test]
fn exact_search_matches_full_sort_oracle() {
    let taxonomy = StyleTaxonomy::synthetic(2, 2, 2);
    let store = random_store(1000, 16, 1, &taxonomy);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..100 {
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut oracle: Vec<(f64, usize)> = (0..store.len())
            .map(|i| {
                let d = store
                    .key(i)
                    .iter()
                    .zip(&q)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>();
                (d, i)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for k in [1, 10, 64, 1000] {
            let got = store.knn_exact(&q, k).unwrap();
            let same = got.len() == k
                && got
                    .iter()
                    .zip(&oracle)
                    .all(|(n, &(d, i))| n.index == i && n.distance == d);
            mismatches += usize::from(!same);
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(10);
    report(
        1,
        "exact kNN equals full-sort oracle",
        pass,
        format!(
            "{mismatches} mismatching queries, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn ivf_full_probe_is_exact_and_partial_probe_recalls() {
    let p = two_style();
    let index = build_ivf(&p.store, 32, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // stored keys and held-out contexts
    let mut queries: Vec<Vec<f32>> = (0..100)
        .map(|_| p.store.key(rng.gen_range(0..p.store.len())))
        .collect();
    for _ in 0..100 {
        let d = &p.test[rng.gen_range(0..p.test.len())];
        let i = rng.gen_range(0..d.tokens.len());
        queries.push(to_query(&p.params.encode(&d.tokens[..i]).unwrap()));
    }
    let mut identical = true;
    let mut recall = 0.0;
    for q in &queries {
        let exact = p.store.knn_exact(q, 64).unwrap();
        identical &= index
            .knn_approx(&p.store, q, 64, index.n_clusters())
            .unwrap()
            == exact;
        let approx = index
            .knn_approx(&p.store, q, 64, index.default_probe())
            .unwrap();
        recall += recall_at_k(&exact, &approx);
    }
    recall /= queries.len() as f64;
    let pass = identical && recall >= 0.9;
    report(
        2,
        "IVF soundness",
        pass,
        format!(
            "full probe identical: {identical}; recall@64 at {}/{} clusters: {recall:.4} (target 0.9)",
            index.default_probe(),
            index.n_clusters()
        ),
    );
    assert!(pass);
}

#[test]
fn distributions_are_normalized() {
    let taxonomy = StyleTaxonomy::synthetic(2, 2, 3);
    let case = (
        any::<u64>(),
        2usize..6,
        4usize..30,
        0usize..12,
        1usize..40,
        0.0f64..=1.0,
        0usize..8,
    );
    let mut runner = TestRunner::new_with_rng(
        Config::with_cases(1000),
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let worst = std::cell::Cell::new(0.0f64);
    let result = runner.run(&case, |(seed, d, v, ctx_len, k, lambda, fbits)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LmParameters::init(LmConfig {
            context_window: 3,
            embedding_dim: 4,
            hidden_dim: d,
            vocab_size: v,
            learning_rate: 0.1,
            epochs: 0,
            batch_size: 1,
            seed,
        })
        .unwrap();
        let n = rng.gen_range(1..60);
        let keys: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let values = (0..n).map(|_| rng.gen_range(0..v as u32)).collect();
        let localities = (0..n)
            .map(|_| {
                taxonomy
                    .descriptor(rng.gen_range(0..4), rng.gen_range(0..3))
                    .unwrap()
            })
            .collect();
        let kind = if rng.gen_bool(0.5) {
            DistanceKind::SquaredL2
        } else {
            DistanceKind::L2
        };
        let store =
            Datastore::from_entries(d, &keys, values, localities, kind, taxonomy.fingerprint())
                .unwrap();
        let context: Vec<u32> = (0..ctx_len).map(|_| rng.gen_range(0..v as u32)).collect();
        let query = taxonomy
            .descriptor(rng.gen_range(0..4), rng.gen_range(0..3))
            .unwrap();
        let features = all_feature_sets()[fbits];
        let scales = (0..features.combinations())
            .map(|_| rng.gen_range(0.0..5.0))
            .collect();
        let weighted = LocalityWeights::from_scales(features, scales).unwrap();
        let identity = LocalityWeights::identity(LocalityFeatureSet::NONE);

        let lm = params.lm_distribution(&context).unwrap();
        let neighbors = store
            .knn_exact(&to_query(&params.encode(&context).unwrap()), k)
            .unwrap();
        let knn_plain = knn_locality_distribution(&neighbors, &query, &identity, kind, v).unwrap();
        let knn_weighted =
            knn_locality_distribution(&neighbors, &query, &weighted, kind, v).unwrap();
        let cfg = KnnLmConfig {
            k,
            lambda,
            distance: kind,
            retrieval: Retrieval::Exact,
            style_restriction: None,
        };
        let mixed = KnnLm::new(cfg, &store, None, &params, &weighted, &taxonomy)
            .unwrap()
            .combined_distribution(&context, &query)
            .unwrap();
        for dist in [&lm, &knn_plain, &knn_weighted, &mixed] {
            let err = (dist.iter().sum::<f64>() - 1.0).abs();
            worst.set(worst.get().max(err));
            prop_assert!(err < 1e-9);
            prop_assert!(dist.iter().all(|p| *p >= 0.0));
        }
        Ok(())
    });
    let pass = result.is_ok();
    report(
        3,
        "distribution normalization",
        pass,
        match &result {
            Ok(()) => format!("1000 cases, worst |sum - 1| = {:.2e}", worst.get()),
            Err(e) => format!("{e}"),
        },
    );
    assert!(pass);
}

#[test]
fn interpolation_endpoints() {
    let p = two_style();
    let identity = LocalityWeights::identity(LocalityFeatureSet::NONE);
    let make = |lambda, k| {
        KnnLm::new(
            KnnLmConfig {
                k,
                lambda,
                ..Default::default()
            },
            &p.store,
            None,
            &p.params,
            &identity,
            &p.taxonomy,
        )
        .unwrap()
    };
    let zero = make(0.0, 64);
    let one = make(1.0, 1);
    let mut bit_exact = true;
    let mut point_mass = true;
    let mut checked = 0;
    for d in p.test.iter().take(30) {
        for i in 0..d.tokens.len() {
            let ctx = &d.tokens[..i];
            bit_exact &= zero.combined_distribution(ctx, &d.locality).unwrap()
                == p.params.lm_distribution(ctx).unwrap();
            let step = one.step(ctx, &d.locality).unwrap();
            let t = step.neighbors[0].value as usize;
            point_mass &= step.distribution[t] == 1.0
                && step
                    .distribution
                    .iter()
                    .enumerate()
                    .all(|(j, &q)| j == t || q == 0.0);
            checked += 1;
        }
    }
    let pass = bit_exact && point_mass;
    report(
        4,
        "interpolation endpoints",
        pass,
        format!("{checked} contexts; lambda=0 bit-exact: {bit_exact}; lambda=1 point mass: {point_mass}"),
    );
    assert!(pass);
}

#[test]
fn all_ones_weights_reduce_to_plain_knn() {
    let p = two_style();
    let mut docs: Vec<&Document> = Vec::new();
    let mut tokens = 0;
    for d in p.valid.iter().chain(&p.test) {
        if tokens >= 1000 {
            break;
        }
        tokens += d.tokens.len();
        docs.push(d);
    }
    let cfg = KnnLmConfig {
        k: 64,
        lambda: 0.25,
        ..Default::default()
    };
    let nlls = |w: &LocalityWeights| -> Vec<f64> {
        let m = KnnLm::new(cfg.clone(), &p.store, None, &p.params, w, &p.taxonomy).unwrap();
        docs.iter()
            .flat_map(|d| m.target_probs(&d.tokens, &d.locality).unwrap())
            .map(|t| -t.mixed(cfg.lambda).ln())
            .collect()
    };
    let plain = nlls(&LocalityWeights::identity(LocalityFeatureSet::NONE));
    let mut worst = 0.0f64;
    for f in all_feature_sets() {
        for (a, b) in nlls(&LocalityWeights::identity(f)).iter().zip(&plain) {
            worst = worst.max((a - b).abs());
        }
    }
    let pass = tokens >= 1000 && worst <= 1e-12;
    report(
        5,
        "identity reduction",
        pass,
        format!("{tokens} tokens x 8 feature sets, max |dNLL| = {worst:.2e}"),
    );
    assert!(pass);
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    // (a) reference model, every parameter of every group
    let cfg = LmConfig {
        context_window: 3,
        embedding_dim: 4,
        hidden_dim: 5,
        vocab_size: 7,
        learning_rate: 0.1,
        epochs: 0,
        batch_size: 1,
        seed: 9,
    };
    let mut params = LmParameters::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (_, g) in params.groups_mut() {
        g.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
    }
    let contexts: Vec<Vec<u32>> = (0..6)
        .map(|i| (0..i).map(|_| rng.gen_range(0..7)).collect())
        .collect();
    let examples: Vec<Example> = contexts
        .iter()
        .map(|c| Example {
            context: c,
            target: rng.gen_range(0..7),
        })
        .collect();
    let (_, grad) = loss_and_gradient(&params, &examples).unwrap();
    let eps = 1e-5;
    let mut lm_worst = 0.0f64;
    let mut lm_count = 0;
    for g in 0..6 {
        let len = params.groups()[g].1.len();
        for j in 0..len {
            let orig = params.groups()[g].1[j];
            params.groups_mut()[g].1[j] = orig + eps;
            let plus = loss_and_gradient(&params, &examples).unwrap().0;
            params.groups_mut()[g].1[j] = orig - eps;
            let minus = loss_and_gradient(&params, &examples).unwrap().0;
            params.groups_mut()[g].1[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            lm_worst = lm_worst.max(relative_error(grad.groups()[g].1[j], numeric));
            lm_count += 1;
        }
    }

    // (b) locality scales, all three features
    let taxonomy = StyleTaxonomy::synthetic(2, 2, 2);
    let cache: Vec<CachedSample> = (0..25)
        .map(|_| {
            let q = taxonomy
                .descriptor(rng.gen_range(0..4), rng.gen_range(0..2))
                .unwrap();
            let k = 12;
            let mut is_target: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.3)).collect();
            is_target[0] = true;
            CachedSample {
                query: q,
                distances: (0..k).map(|_| rng.gen_range(0.0..3.0)).collect(),
                localities: (0..k)
                    .map(|_| {
                        taxonomy
                            .descriptor(rng.gen_range(0..4), rng.gen_range(0..2))
                            .unwrap()
                    })
                    .collect(),
                is_target,
            }
        })
        .collect();
    let features = LocalityFeatureSet::of(&[Feature::Style, Feature::Source, Feature::Category]);
    let scales: Vec<f64> = (0..8).map(|_| rng.gen_range(0.2..2.0)).collect();
    let w = LocalityWeights::from_scales(features, scales).unwrap();
    let (_, theta_grad, _) = locality_loss_and_gradient(&w, &cache);
    let mut theta_worst = 0.0f64;
    for c in 0..8 {
        let mut plus = w.clone();
        plus.set_scale(c, w.scale(c) + eps);
        let mut minus = w.clone();
        minus.set_scale(c, w.scale(c) - eps);
        let numeric = (locality_loss_and_gradient(&plus, &cache).0
            - locality_loss_and_gradient(&minus, &cache).0)
            / (2.0 * eps);
        theta_worst = theta_worst.max(relative_error(theta_grad[c], numeric));
    }
    let pass = lm_worst < 1e-4 && theta_worst < 1e-4;
    report(
        6,
        "gradient correctness",
        pass,
        format!(
            "model: {lm_count} parameters, max rel err {lm_worst:.2e}; scales: 8 components, max rel err {theta_worst:.2e}"
        ),
    );
    assert!(pass);
}

#[test]
fn style_masked_retrieval_equals_single_style_store() {
    let p = two_style();
    let identity = LocalityWeights::identity(LocalityFeatureSet::NONE);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n_styles = p.taxonomy.styles().len() as u16;
    let rebuilt: Vec<Datastore> = (0..n_styles)
        .map(|s| {
            let docs: Vec<Document> = p
                .train
                .iter()
                .filter(|d| d.locality.style == s)
                .cloned()
                .collect();
            Datastore::from_documents(&p.params, &docs, &p.taxonomy, DistanceKind::SquaredL2)
                .unwrap()
        })
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = &p.test[rng.gen_range(0..p.test.len())];
        let ctx = &d.tokens[..rng.gen_range(0..d.tokens.len())];
        let style = rng.gen_range(0..n_styles);
        let query = p.taxonomy.descriptor(style, 0).unwrap();
        let cfg = KnnLmConfig {
            k: 64,
            lambda: 0.5,
            ..Default::default()
        };
        let masked = KnnLm::new(
            KnnLmConfig {
                style_restriction: Some(style),
                ..cfg.clone()
            },
            &p.store,
            None,
            &p.params,
            &identity,
            &p.taxonomy,
        )
        .unwrap();
        let single = KnnLm::new(
            cfg,
            &rebuilt[style as usize],
            None,
            &p.params,
            &identity,
            &p.taxonomy,
        )
        .unwrap();
        let a = masked.combined_distribution(ctx, &query).unwrap();
        let b = single.combined_distribution(ctx, &query).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let pass = worst <= 1e-12;
    report(
        7,
        "single-style equivalence",
        pass,
        format!("100 queries, max |dp| = {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn ablation_direction_on_two_style_corpus() {
    let p = two_style();
    let a = two_style_ablation();
    let none = row(&a.rows, &[]);
    let style = row(&a.rows, &[Feature::Style]);
    // bit 0 of the style-only set is "style matches"
    let (mismatch, matched) = (style.scales["0"], style.scales["1"]);
    let within = style.test.perplexity <= none.test.perplexity * 1.005;
    let total = p.build_time + a.time;
    let pass = within && mismatch > matched && total < Duration::from_secs(600);
    let mut table = String::new();
    for r in &a.rows {
        table.push_str(&format!("{}={:.3} ", r.features, r.test.perplexity));
    }
    report(
        8,
        "ablation direction",
        pass,
        format!(
            "test ppl style {:.4} vs none {:.4}; a_mismatch {mismatch:.4} > a_match {matched:.4}; pipeline {:.1}s; rows: {}",
            style.test.perplexity,
            none.test.perplexity,
            total.as_secs_f64(),
            table.trim_end()
        ),
    );
    assert!(pass);
}

#[test]
fn locality_model_controls_style() {
    let p = two_style();
    let a = two_style_ablation();
    let style_row = row(&a.rows, &[Feature::Style]);
    let style_w = weights_of(style_row);
    let plain_w = LocalityWeights::identity(LocalityFeatureSet::NONE);
    let lambda = 0.5;
    let cfg = KnnLmConfig {
        k: 64,
        lambda,
        ..Default::default()
    };
    let local = KnnLm::new(
        cfg.clone(),
        &p.store,
        None,
        &p.params,
        &style_w,
        &p.taxonomy,
    )
    .unwrap();
    let plain = KnnLm::new(cfg, &p.store, None, &p.params, &plain_w, &p.taxonomy).unwrap();
    let held: Vec<Document> = p.valid.iter().chain(&p.test).cloned().collect();
    let prompts = prompts_from_documents(&held, 100, 21);
    let decode = Decode::Sample {
        temperature: 1.0,
        top_k_tokens: 0,
    };
    let (rows, summary) = compare_models(
        &local, &plain, &p.params, &p.vocab, &prompts, 10, decode, 17,
    )
    .unwrap();
    let at_least = rows
        .iter()
        .filter(|r| r.style_match_a >= r.style_match_b)
        .count();
    let pass = rows.len() == 100
        && at_least as f64 >= 0.5 * rows.len() as f64
        && summary.mean_style_delta > 0.0;
    report(
        9,
        "style-control direction",
        pass,
        format!(
            "{} prompts, lambda {lambda}: locality >= plain on {at_least}, mean improvement {:.4}",
            rows.len(),
            summary.mean_style_delta
        ),
    );
    assert!(pass);
}

#[test]
fn heatmap_properties_and_family_direction() {
    let p = build_pipeline(StyleTaxonomy::synthetic(2, 2, 2), 120, 3);
    let all: Vec<Document> = p
        .train
        .iter()
        .chain(&p.valid)
        .chain(&p.test)
        .cloned()
        .collect();
    let m = style_similarity_heatmap(&p.params, &all, &p.taxonomy).unwrap();
    let n = m.styles.len();
    let mut asym = 0.0f64;
    let mut diag_ok = true;
    let mut same = f64::INFINITY;
    let mut cross = f64::NEG_INFINITY;
    for a in 0..n {
        diag_ok &= m.get(a, a) == 1.0;
        for b in 0..n {
            asym = asym.max((m.get(a, b) - m.get(b, a)).abs());
            if a == b {
                continue;
            }
            if p.taxonomy.category_of(a as u16) == p.taxonomy.category_of(b as u16) {
                same = same.min(m.get(a, b));
            } else {
                cross = cross.max(m.get(a, b));
            }
        }
    }
    let pass = asym <= 1e-9 && diag_ok && same > cross;
    report(
        10,
        "heatmap properties",
        pass,
        format!(
            "max asymmetry {asym:.1e}, unit diagonal {diag_ok}, min same-family {same:.4} > max cross-family {cross:.4}"
        ),
    );
    assert!(pass);
}

/// Every artifact of a small end-to-end run, as bytes.
fn pipeline_artifacts(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    let taxonomy = StyleTaxonomy::synthetic(2, 1, 2);
    let records = generate_synthetic_corpus(&taxonomy, 40, seed);
    let mut corpus = Vec::new();
    write_jsonl(&mut corpus, &records, &taxonomy).unwrap();
    let vocab = Vocabulary::build(&records, 1).unwrap();
    let docs = tokenize_records(&records, &vocab);
    let docs_json: Vec<u8> = docs
        .iter()
        .flat_map(|d| {
            let mut s = serde_json::to_vec(d).unwrap();
            s.push(b'\n');
            s
        })
        .collect();
    let train = split_documents(&docs, Split::Train);
    let valid = split_documents(&docs, Split::Valid);
    let test = split_documents(&docs, Split::Test);
    let mut cfg = LmConfig::desk(vocab.len());
    cfg.epochs = 4;
    cfg.hidden_dim = 16;
    cfg.seed = seed;
    let params = train_lm(cfg, &train, &valid).unwrap().params;
    let store =
        Datastore::from_documents(&params, &train, &taxonomy, DistanceKind::SquaredL2).unwrap();
    let ivf = build_ivf(&store, 8, seed).unwrap();
    let sample = AnnotatedSample::from_documents(&train, 300, seed);
    let cache = cache_neighbors(&store, &params, &sample, 16, DistanceKind::SquaredL2).unwrap();
    let features = LocalityFeatureSet::of(&[Feature::Style, Feature::Source]);
    let weights = LocalityTrainOutcome::fit(&cache, features, LocalityHyper::default())
        .unwrap()
        .weights;
    let grid = default_lambda_grid();
    let provided = [weights.clone()];
    let inputs = AblationInputs {
        store: &store,
        ivf: Some(&ivf),
        model: &params,
        taxonomy: &taxonomy,
        valid: &valid,
        test: &test,
        k: 16,
        distance: DistanceKind::SquaredL2,
        retrieval: Retrieval::Ivf { n_probe: 2 },
        lambda_grid: &grid,
        weights: WeightSource::Provided(&provided),
    };
    let spec = AblationSpec {
        rows: vec![LocalityFeatureSet::NONE, features],
    };
    let mut report = EvalReport::new(serde_json::json!({ "seed": seed }));
    report.rows = run_ablation(&spec, &inputs).unwrap();
    let heat = style_similarity_heatmap(&params, &docs, &taxonomy).unwrap();
    let model = KnnLm::new(
        KnnLmConfig {
            k: 16,
            lambda: 0.5,
            ..Default::default()
        },
        &store,
        None,
        &params,
        &weights,
        &taxonomy,
    )
    .unwrap();
    let request = GenerationRequest {
        prompt: test[0].tokens[..3].to_vec(),
        target: test[0].locality,
        max_new_tokens: 8,
        decode: Decode::Sample {
            temperature: 0.9,
            top_k_tokens: 5,
        },
        seed,
    };
    let generation = model.generate(&request).unwrap();
    let record = GenerationRecord::new(&request, &generation, &vocab, &taxonomy);
    vec![
        ("corpus", corpus),
        ("vocabulary", vocab.to_text().into_bytes()),
        ("documents", docs_json),
        ("checkpoint", params.to_bytes()),
        ("datastore", store.to_bytes()),
        ("ivf", ivf.to_bytes()),
        ("weights", weights.to_text().into_bytes()),
        ("report", report.to_json().into_bytes()),
        ("heatmap", heat.to_csv().into_bytes()),
        ("generation", serde_json::to_vec(&record).unwrap()),
    ]
}

#[test]
fn pipeline_is_deterministic() {
    let first = pipeline_artifacts(5);
    // second run on a single worker thread
    let second = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| pipeline_artifacts(5));
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect();
    let pass = differing.is_empty();
    report(
        11,
        "determinism",
        pass,
        format!(
            "{} artifacts compared across two runs (second single-threaded); differing: {differing:?}",
            first.len()
        ),
    );
    assert!(pass);
}

#[test]
fn formats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let taxonomy = StyleTaxonomy::synthetic(2, 2, 2);
    let mut failures = Vec::new();

    let store = random_store(300, 12, 8, &taxonomy);
    let path = dir.path().join("store.bin");
    store.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let reopened = Datastore::open(&path).unwrap();
    if reopened.to_bytes() != first
        || Datastore::from_bytes(first.clone()).unwrap().to_bytes() != first
    {
        failures.push("datastore");
    }

    let ivf = build_ivf(&store, 10, 1).unwrap();
    let bytes = ivf.to_bytes();
    if IvfIndex::from_bytes(&bytes).unwrap().to_bytes() != bytes {
        failures.push("ivf");
    }

    let mut params = LmParameters::init(LmConfig::desk(50)).unwrap();
    params.groups_mut()[5]
        .1
        .iter_mut()
        .enumerate()
        .for_each(|(i, b)| *b = (i as f64).sin() / 3.0);
    let path = dir.path().join("model.bin");
    params.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = LmParameters::load(&path).unwrap();
    if loaded != params || loaded.to_bytes() != first {
        failures.push("checkpoint");
    }

    let features = LocalityFeatureSet::of(&[Feature::Style, Feature::Category]);
    let w =
        LocalityWeights::from_scales(features, vec![0.1 + 0.2, 1.0 / 3.0, 7e-12, 2.5e8]).unwrap();
    let path = dir.path().join("weights.txt");
    w.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = LocalityWeights::load(&path).unwrap();
    if loaded != w || loaded.to_text().into_bytes() != first {
        failures.push("weights");
    }

    let eval_report =
        EvalReport::from_json(&String::from_utf8(pipeline_report_bytes()).unwrap()).unwrap();
    let path = dir.path().join("report.json");
    eval_report.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = EvalReport::load(&path).unwrap();
    if loaded.to_json().into_bytes() != first {
        failures.push("report");
    }

    let pass = failures.is_empty();
    report(
        12,
        "format round-trips",
        pass,
        format!("datastore, ivf, checkpoint, weights, report; failing: {failures:?}"),
    );
    assert!(pass);
}

/// A report with real ablation rows, including an infinite perplexity on
/// the λ curve.
fn pipeline_report_bytes() -> Vec<u8> {
    let p = two_style();
    let grid = [0.0, 0.5, 1.0];
    let identity = LocalityWeights::identity(LocalityFeatureSet::of(&[Feature::Style]));
    let provided = [identity];
    let inputs = AblationInputs {
        store: &p.store,
        ivf: None,
        model: &p.params,
        taxonomy: &p.taxonomy,
        valid: &p.valid[..10],
        test: &p.test[..10],
        k: 8,
        distance: DistanceKind::SquaredL2,
        retrieval: Retrieval::Exact,
        lambda_grid: &grid,
        weights: WeightSource::Provided(&provided),
    };
    let spec = AblationSpec {
        rows: vec![
            LocalityFeatureSet::NONE,
            LocalityFeatureSet::of(&[Feature::Style]),
        ],
    };
    let mut report = EvalReport::new(serde_json::json!({ "k": 8, "grid": grid }));
    report.rows = run_ablation(&spec, &inputs).unwrap();
    report.style_match.insert("s0".into(), 0.1 + 0.2);
    report.to_json().into_bytes()
}
