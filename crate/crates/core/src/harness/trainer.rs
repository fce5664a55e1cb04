//! The epoch loop: per-batch operation sampling, interpolation forward,
//! loss, backward, two-group SGD update, dev evaluation and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{
    apply_plan, sample_operations, ParaphraseTable, PerturbedSample, SynonymLexicon,
};
use crate::config::{AblationMode, LabConfig};
use crate::encoder::{
    bind, classify, forward_from_layer, forward_full, forward_to_layer, init_model,
    EncoderConfig, EncoderModel, HiddenState, ModelVars,
};
use crate::error::{Error, Result};
use crate::harness::metrics::{evaluate, RunRecord};
use crate::mixer::{
    doublemix_forward, mix_step1, mix_step2, sample_beta_constrained, sample_dirichlet,
    select_layer, MixPlan, MixStreams,
};
use crate::objective::{combined_loss, cross_entropy, LossBreakdown};
use crate::rng::{self, Stream};
use crate::tensor::{Tape, Var};
use crate::text::{batch_iter, build_vocab, pad_batch, Batch, Dataset, Vocabulary};

/// Shared augmentation resources for a run.
#[derive(Default)]
pub struct Resources {
    pub lexicon: SynonymLexicon,
    pub table: ParaphraseTable,
}

/// A trained model with its vocabulary and run record.
pub struct TrainedRun {
    pub model: EncoderModel,
    pub vocab: Vocabulary,
    pub record: RunRecord,
    /// Realized per-batch mix plans, kept only when plan logging is on.
    pub mix_plans: Vec<MixPlan>,
}

struct RunStreams {
    ops: Stream,
    augment: Stream,
    layer: Stream,
    dirichlet: Stream,
    beta: Stream,
    noise: Stream,
    partner: Stream,
}

impl RunStreams {
    fn new(seed: u64) -> Self {
        Self {
            ops: rng::derive(seed, "ops"),
            augment: rng::derive(seed, "augment"),
            layer: rng::derive(seed, "layer"),
            dirichlet: rng::derive(seed, "dirichlet"),
            beta: rng::derive(seed, "beta"),
            noise: rng::derive(seed, "noise"),
            partner: rng::derive(seed, "partner"),
        }
    }
}

fn sgd_update(
    model: &mut EncoderModel,
    tape: &Tape,
    vars: &ModelVars,
    encoder_lr: f64,
    classifier_lr: f64,
) {
    let (enc_params, cls_params) = model.params_mut();
    let (enc_vars, cls_vars) = vars.param_vars();
    for (param, var) in enc_params.into_iter().zip(enc_vars) {
        if let Some(grad) = tape.grad(var) {
            for (x, g) in param.data_mut().iter_mut().zip(grad) {
                *x -= encoder_lr * g;
            }
        }
    }
    for (param, var) in cls_params.into_iter().zip(cls_vars) {
        if let Some(grad) = tape.grad(var) {
            for (x, g) in param.data_mut().iter_mut().zip(grad) {
                *x -= classifier_lr * g;
            }
        }
    }
}

/// Builds the original batch and its N perturbed variants, all padded to the
/// group's max length so hidden shapes agree at the interpolation layer.
fn build_group(
    dataset: &Dataset,
    vocab: &Vocabulary,
    batch: &Batch,
    config: &LabConfig,
    resources: &Resources,
    streams: &mut RunStreams,
) -> Result<(Batch, Vec<(Batch, Vec<f64>)>)> {
    let members = &batch.members;
    let mut per_example: Vec<Vec<PerturbedSample>> = Vec::with_capacity(members.len());
    for &idx in members {
        let plan = sample_operations(&config.ops, config.n_aug, &mut streams.ops)?;
        per_example.push(apply_plan(
            &dataset.examples[idx],
            &plan,
            &resources.lexicon,
            &resources.table,
            &mut streams.augment,
        ));
    }

    let orig_rows: Vec<Vec<usize>> = members
        .iter()
        .map(|&i| vocab.encode(&dataset.examples[i].tokens))
        .collect();
    let mut group_seq = orig_rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut perturbed_rows: Vec<Vec<Vec<usize>>> = Vec::with_capacity(config.n_aug);
    let mut sigmas: Vec<Vec<f64>> = Vec::with_capacity(config.n_aug);
    for k in 0..config.n_aug {
        let mut rows = Vec::with_capacity(members.len());
        let mut row_sigma = Vec::with_capacity(members.len());
        for samples in &per_example {
            let mut ids = vocab.encode(&samples[k].tokens);
            ids.truncate(config.max_seq_len);
            group_seq = group_seq.max(ids.len());
            rows.push(ids);
            row_sigma.push(samples[k].noise_sigma.unwrap_or(0.0));
        }
        perturbed_rows.push(rows);
        sigmas.push(row_sigma);
    }

    let orig = pad_batch(&orig_rows, &batch.labels, members, group_seq);
    let perturbed = perturbed_rows
        .into_iter()
        .zip(sigmas)
        .map(|(rows, s)| (pad_batch(&rows, &batch.labels, members, group_seq), s))
        .collect();
    Ok((orig, perturbed))
}

/// Uniform random partner for every row; same-class mode restricts partners
/// to the row's label, falling back to the row itself when it is the only
/// member of its class (counted for logging).
fn partner_indices(
    labels: &[usize],
    same_class: bool,
    stream: &mut Stream,
    fallbacks: &mut usize,
) -> Vec<usize> {
    if !same_class {
        let mut perm: Vec<usize> = (0..labels.len()).collect();
        perm.shuffle(stream);
        return perm;
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let candidates: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|&(j, &l)| j != i && l == label)
                .map(|(j, _)| j)
                .collect();
            if candidates.is_empty() {
                *fallbacks += 1;
                i
            } else {
                candidates[stream.gen_range(0..candidates.len())]
            }
        })
        .collect()
}

struct StepOutcome {
    loss: Var,
    breakdown: LossBreakdown,
    plan: Option<MixPlan>,
}

/// One training step's loss graph under the configured ablation mode.
#[allow(clippy::too_many_arguments)]
fn train_step(
    tape: &mut Tape,
    vars: &ModelVars,
    enc_config: &EncoderConfig,
    dataset: &Dataset,
    vocab: &Vocabulary,
    batch: &Batch,
    config: &LabConfig,
    resources: &Resources,
    streams: &mut RunStreams,
    fallbacks: &mut usize,
) -> Result<StepOutcome> {
    let mode = config.ablation_mode;
    if mode == AblationMode::NoAugBaseline {
        let p = forward_full(tape, vars, enc_config, batch, None)?;
        let loss = cross_entropy(tape, p, &batch.labels)?;
        let ce = tape.value(loss).item();
        return Ok(StepOutcome {
            loss,
            breakdown: LossBreakdown { ce, jsd: 0.0, gamma: 0.0, total: ce },
            plan: None,
        });
    }

    let gamma = if mode == AblationMode::NoJsd { 0.0 } else { config.gamma };

    match mode {
        AblationMode::Full | AblationMode::NoJsd => {
            let (orig, perturbed) =
                build_group(dataset, vocab, batch, config, resources, streams)?;
            let mut mix_streams = MixStreams {
                layer: &mut streams.layer,
                dirichlet: &mut streams.dirichlet,
                beta: &mut streams.beta,
                noise: &mut streams.noise,
            };
            let (p_mix, p_orig, plan) = doublemix_forward(
                tape,
                vars,
                enc_config,
                &orig,
                &perturbed,
                &config.mix_config(),
                &mut mix_streams,
            )?;
            let (loss, breakdown) = combined_loss(tape, p_orig, p_mix, &orig.labels, gamma)?;
            Ok(StepOutcome { loss, breakdown, plan: Some(plan) })
        }
        AblationMode::MergedSteps => {
            let (orig, perturbed) =
                build_group(dataset, vocab, batch, config, resources, streams)?;
            let layer = select_layer(&config.layer_set, &mut streams.layer)?;
            let weights =
                sample_dirichlet(config.n_aug + 1, config.tau, &mut streams.dirichlet)?;

            let h_orig = forward_to_layer(tape, vars, enc_config, &orig, layer, None)?;
            let pooled_orig = forward_from_layer(tape, vars, enc_config, &h_orig)?;
            let p_orig = classify(tape, vars, pooled_orig)?;

            let mut states = vec![&h_orig];
            let mut h_perturbed = Vec::with_capacity(config.n_aug);
            for (pb, s) in &perturbed {
                h_perturbed.push(forward_to_layer(
                    tape,
                    vars,
                    enc_config,
                    pb,
                    layer,
                    Some((s, &mut streams.noise)),
                )?);
            }
            states.extend(h_perturbed.iter());
            let h_mix = mix_step1(tape, &states, &weights, &orig.mask)?;
            let pooled_mix = forward_from_layer(tape, vars, enc_config, &h_mix)?;
            let p_mix = classify(tape, vars, pooled_mix)?;
            let (loss, breakdown) = combined_loss(tape, p_orig, p_mix, &orig.labels, gamma)?;
            Ok(StepOutcome {
                loss,
                breakdown,
                plan: Some(MixPlan { layer, weights, lambda: vec![] }),
            })
        }
        AblationMode::MixOtherSample | AblationMode::MixSameClass => {
            let layer = select_layer(&config.layer_set, &mut streams.layer)?;
            let lambda: Vec<f64> = if config.per_example_lambda {
                (0..batch.labels.len())
                    .map(|_| sample_beta_constrained(config.alpha, &mut streams.beta))
                    .collect::<Result<_>>()?
            } else {
                vec![sample_beta_constrained(config.alpha, &mut streams.beta)?]
            };
            let partners = partner_indices(
                &batch.labels,
                mode == AblationMode::MixSameClass,
                &mut streams.partner,
                fallbacks,
            );

            let h_orig = forward_to_layer(tape, vars, enc_config, batch, layer, None)?;
            let pooled_orig = forward_from_layer(tape, vars, enc_config, &h_orig)?;
            let p_orig = classify(tape, vars, pooled_orig)?;

            let partner_values = tape.permute_rows(h_orig.values, &partners)?;
            let h_partner = HiddenState {
                layer,
                values: partner_values,
                mask: batch.mask.clone(),
                batch: h_orig.batch,
                seq: h_orig.seq,
            };
            let h_mix = mix_step2(tape, &h_orig, &h_partner, &lambda)?;
            let pooled_mix = forward_from_layer(tape, vars, enc_config, &h_mix)?;
            let p_mix = classify(tape, vars, pooled_mix)?;
            let (loss, breakdown) = combined_loss(tape, p_orig, p_mix, &batch.labels, gamma)?;
            Ok(StepOutcome {
                loss,
                breakdown,
                plan: Some(MixPlan { layer, weights: vec![], lambda }),
            })
        }
        AblationMode::NoAugBaseline => unreachable!("handled above"),
    }
}

/// Trains one model for one seed. The vocabulary is built from the training
/// split only; the best-dev checkpoint is returned and training stops after
/// `patience` epochs without dev improvement.
pub fn train_run(
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &LabConfig,
    resources: &Resources,
    seed: u64,
) -> Result<TrainedRun> {
    config.validate()?;
    let corpus: Vec<&[String]> =
        train_set.examples.iter().map(|e| e.tokens.as_slice()).collect();
    let vocab = build_vocab(corpus, config.min_freq)?;
    let enc_config = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        num_layers: config.num_layers,
        num_classes: train_set.num_classes(),
    };
    let mut model = init_model(&enc_config, &mut rng::derive(seed, "init"))?;
    let mut streams = RunStreams::new(seed);

    let mut best_model = model.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut epochs_since_best = 0;
    let mut per_epoch = Vec::new();
    let mut fallbacks = 0usize;
    let mut mix_plans = Vec::new();
    let mut epochs_ran = 0;
    let mut ce_sum = 0.0;
    let mut jsd_sum = 0.0;
    let mut steps = 0usize;

    for epoch in 0..config.epochs {
        for (batch_idx, batch) in
            batch_iter(train_set, &vocab, config.batch_size, seed, epoch as u64)
                .iter()
                .enumerate()
        {
            let mut tape = Tape::new();
            let vars = bind(&model, &mut tape, true);
            let outcome = train_step(
                &mut tape,
                &vars,
                &enc_config,
                train_set,
                &vocab,
                batch,
                config,
                resources,
                &mut streams,
                &mut fallbacks,
            )?;
            if !outcome.breakdown.total.is_finite() {
                let plan = outcome
                    .plan
                    .as_ref()
                    .and_then(|p| serde_json::to_string(p).ok())
                    .unwrap_or_else(|| "none".to_string());
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx} (ce={}, jsd={}, plan={plan})",
                    outcome.breakdown.ce, outcome.breakdown.jsd
                )));
            }
            tape.backward(outcome.loss)?;
            sgd_update(&mut model, &tape, &vars, config.encoder_lr, config.classifier_lr);
            ce_sum += outcome.breakdown.ce;
            jsd_sum += outcome.breakdown.jsd;
            steps += 1;
            if config.log_mix_plans {
                if let Some(plan) = outcome.plan {
                    mix_plans.push(plan);
                }
            }
        }
        epochs_ran = epoch + 1;

        let dev = evaluate(&model, &vocab, dev_set, config.batch_size)?;
        per_epoch.push(dev.accuracy);
        if dev.accuracy > best_dev {
            best_dev = dev.accuracy;
            best_model = model.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }

    let final_dev = evaluate(&best_model, &vocab, dev_set, config.batch_size)?;
    Ok(TrainedRun {
        model: best_model,
        vocab,
        record: RunRecord {
            seed,
            accuracy: final_dev.accuracy,
            macro_f1: final_dev.macro_f1,
            epochs_ran,
            per_epoch,
            mean_train_ce: ce_sum / steps.max(1) as f64,
            mean_train_jsd: jsd_sum / steps.max(1) as f64,
            same_class_fallbacks: fallbacks,
        },
        mix_plans,
    })
}

/// Trains one run per configured seed; the reported accuracy / F1 per run
/// come from the test set when one is supplied, the dev set otherwise.
pub fn train_multi(
    train_set: &Dataset,
    dev_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &LabConfig,
    resources: &Resources,
) -> Result<(Vec<TrainedRun>, crate::harness::MetricsReport)> {
    let mut runs = Vec::with_capacity(config.seeds.len());
    let mut records = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut run = train_run(train_set, dev_set, config, resources, seed)?;
        if let Some(test) = test_set {
            let m = evaluate(&run.model, &run.vocab, test, config.batch_size)?;
            run.record.accuracy = m.accuracy;
            run.record.macro_f1 = m.macro_f1;
        }
        records.push(run.record.clone());
        runs.push(run);
    }
    Ok((runs, crate::harness::MetricsReport::from_runs(records)))
}
