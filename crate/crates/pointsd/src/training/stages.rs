//! The three pipeline stages.
//!
//! Stage 0 pretrains the stand-in foundation diffusion model on rendered
//! views under learned category tokens. Stage 1 swaps the condition source
//! to the point-cloud encoder and adapts only the cross-attention key/value
//! projections. Stage 2 freezes everything trained so far and distills the
//! frozen model's features into a fresh backbone through the projector.

use super::checkpoint::{load_into, save_checkpoint, CheckpointMeta};
use super::{
    item_noise, patchify_split, run_training_loop, FreezePlan, LoopSpec, PlanItem,
};
use crate::config::{Alignment, Augment, Condition, RunConfig};
use crate::diffusion::{
    build_noise_schedule, denoising_loss, extract_features, unet::condition::zero_tokens, UNet,
};
use crate::encoders::{alignment_loss, alignment_loss_tokens, Backbone, ConditionEncoder, Projector};
use crate::error::{Error, Result};
use crate::geometry::{mix_patchsets, MixMask, PatchSet};
use crate::nn::{Init, PIdx, ParamStore};
use crate::rng;
use crate::synthdata::{stitch_images, Corpus, RenderedImage, SampleRecord};
use crate::tensor::{Arr, Tape};
use std::path::{Path, PathBuf};

pub struct StageOutput {
    pub store: ParamStore,
    pub ckpt: PathBuf,
    pub loss_history: Vec<f64>,
}

fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    let expect = cfg.dataset_config();
    if corpus.config != expect {
        return Err(Error::Training(format!(
            "dataset was built with a different configuration (found {:?}, run expects {:?}); regenerate with gen-data",
            corpus.config, expect
        )));
    }
    Ok(())
}

fn loss_meta(stage: &str, cfg: &RunConfig, history: &[f64]) -> CheckpointMeta {
    CheckpointMeta {
        stage: stage.to_string(),
        epoch: history.len(),
        config_hash: cfg.hash(),
        loss_history: history.iter().enumerate().map(|(i, &l)| (i + 1, l)).collect(),
    }
}

/// The augmented branch must pair the mixed cloud with the stitched images
/// of exactly its two sources; checked every iteration.
fn verify_pairing(mixed: &PatchSet, a: usize, b: usize, mask: &MixMask) -> Result<()> {
    let (a, b) = (a as u64, b as u64);
    let from_a = mixed.source_ids.iter().filter(|&&s| s == a).count();
    let from_b = mixed.source_ids.iter().filter(|&&s| s == b).count();
    let ones = mask.popcount();
    if from_a != ones || from_b != mixed.num_groups() - ones {
        return Err(Error::Training(format!(
            "augmentation pairing violated: {from_a} patches from {a} / {from_b} from {b}, mask has {ones} of {}",
            mixed.num_groups()
        )));
    }
    Ok(())
}

/// Resolve the (patches, image) pair for one plan item under the given
/// augmentation policy.
fn resolve_item(
    items: &[PlanItem],
    slot: usize,
    records: &[SampleRecord],
    patches: &[PatchSet],
    augment: Augment,
) -> Result<(PatchSet, RenderedImage, Option<usize>)> {
    let item = &items[slot];
    let rec = &records[item.idx];
    match item.partner_slot {
        Some(pslot) => {
            let pitem = &items[pslot];
            let prec = &records[pitem.idx];
            let mask = item.mask.as_ref().expect("augmented item carries a mask");
            let mixed = mix_patchsets(&patches[item.idx], &patches[pitem.idx], mask)?;
            verify_pairing(&mixed, item.idx, pitem.idx, mask)?;
            let img = match augment {
                Augment::MixStitch => {
                    let st = stitch_images(&rec.views[item.view], &prec.views[pitem.view])?;
                    let want = rec.views[item.view].width() + prec.views[pitem.view].width();
                    if st.width() != want {
                        return Err(Error::Training(format!("stitched width {} != {want}", st.width())));
                    }
                    st
                }
                _ => rec.views[item.view].clone(),
            };
            Ok((mixed, img, Some(pitem.idx)))
        }
        None => Ok((patches[item.idx].clone(), rec.views[item.view].clone(), None)),
    }
}

/// Pretrain the miniature foundation model: category-token conditioning,
/// the full `[1, T]` time range, every parameter trainable.
pub fn stage0_pretrain(cfg: &RunConfig, corpus: &Corpus, out_dir: &Path, quiet: bool) -> Result<StageOutput> {
    check_corpus(cfg, corpus)?;
    let sched = build_noise_schedule(cfg.schedule_steps, cfg.schedule_beta_start, cfg.schedule_beta_end)?;
    let mut store = ParamStore::new();
    let unet = UNet::build(&mut store, &mut rng::stream(cfg.seed, "init.unet", 0), "unet", cfg.unet_spec());
    let embed = store.register(
        "cond.embed",
        Init::normal(&mut rng::stream(cfg.seed, "init.embed", 0), &[cfg.data_categories, cfg.model_d_cond], 0.5),
    );
    let plan = FreezePlan::all(&store);
    let spec = LoopSpec {
        label: "stage0",
        seed: cfg.seed,
        opt: &cfg.stage0,
        train_len: corpus.train.len(),
        views: cfg.data_views,
        t_range: (1, cfg.schedule_steps),
        augment: Augment::None,
        mix_ratio: cfg.geom_mix_ratio,
        groups: cfg.geom_groups,
        quiet,
    };
    let k = cfg.model_cond_tokens;
    let history = run_training_loop(&spec, &mut store, &plan, |store, items, slot| {
        let item = &items[slot];
        let rec = &corpus.train[item.idx];
        let x0 = rec.views[item.view].to_chw();
        let eps = item_noise(item.item_seed, x0.shape());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let cond = tape.select_rows(bound.var(embed), vec![rec.category; k]);
        let loss = denoising_loss(&unet, &mut tape, &bound, &x0, item.t, cond, &eps, &sched)?;
        let value = tape.value(loss)[[0]] as f64;
        let mut grads = tape.backward(loss);
        Ok((value, bound.grads(&mut grads)))
    })?;
    let ckpt = save_checkpoint(
        &store,
        |n| n.starts_with("unet.") || n.starts_with("cond."),
        &out_dir.join("stage0.ckpt"),
        &loss_meta("stage0", cfg, &history),
    )?;
    Ok(StageOutput { store, ckpt, loss_history: history })
}

/// Point-to-image conditioning: train the condition encoder and the
/// cross-attention key/value projections against the frozen foundation.
pub fn stage1_train(cfg: &RunConfig, corpus: &Corpus, stage0_ckpt: &Path, out_dir: &Path, quiet: bool) -> Result<StageOutput> {
    check_corpus(cfg, corpus)?;
    let sched = build_noise_schedule(cfg.schedule_steps, cfg.schedule_beta_start, cfg.schedule_beta_end)?;
    let mut store = ParamStore::new();
    let unet = UNet::build(&mut store, &mut rng::stream(cfg.seed, "init.unet", 0), "unet", cfg.unet_spec());
    store.register(
        "cond.embed",
        Init::normal(&mut rng::stream(cfg.seed, "init.embed", 0), &[cfg.data_categories, cfg.model_d_cond], 0.5),
    );
    load_into(&mut store, stage0_ckpt, &["unet.", "cond."])?;
    let g = ConditionEncoder::build(&mut store, &mut rng::stream(cfg.seed, "init.g", 0), "g", cfg.encoder_spec());

    let mut trainable: Vec<String> = store.names().filter(|n| n.starts_with("g.")).map(str::to_string).collect();
    trainable.extend(unet.kv_param_names());
    let plan = FreezePlan::from_names(trainable);

    let patches = patchify_split(&corpus.train, cfg.geom_groups, cfg.geom_group_size, cfg.geom_fps_random_start, cfg.seed)?;
    let spec = LoopSpec {
        label: "stage1",
        seed: cfg.seed,
        opt: &cfg.stage1,
        train_len: corpus.train.len(),
        views: cfg.data_views,
        t_range: (cfg.stage1_t_min, cfg.stage1_t_max),
        augment: cfg.stage1_augment,
        mix_ratio: cfg.geom_mix_ratio,
        groups: cfg.geom_groups,
        quiet,
    };
    let history = run_training_loop(&spec, &mut store, &plan, |store, items, slot| {
        let item = &items[slot];
        let (ps, img, _) = resolve_item(items, slot, &corpus.train, &patches, cfg.stage1_augment)?;
        let x0 = img.to_chw();
        let eps = item_noise(item.item_seed, x0.shape());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let cond = g.encode(&mut tape, &bound, &ps);
        let loss = denoising_loss(&unet, &mut tape, &bound, &x0, item.t, cond, &eps, &sched)?;
        let value = tape.value(loss)[[0]] as f64;
        let mut grads = tape.backward(loss);
        Ok((value, bound.grads(&mut grads)))
    })?;
    let ckpt = save_checkpoint(
        &store,
        |n| n.starts_with("unet.") || n.starts_with("cond.") || n.starts_with("g."),
        &out_dir.join("stage1.ckpt"),
        &loss_meta("stage1", cfg, &history),
    )?;
    Ok(StageOutput { store, ckpt, loss_history: history })
}

/// Condition tokens for the frozen extraction pass.
fn condition_values(
    cfg: &RunConfig,
    store: &ParamStore,
    g: &ConditionEncoder,
    embed: PIdx,
    ps: &PatchSet,
    label: usize,
    partner_label: Option<usize>,
) -> Arr {
    match cfg.stage2_condition {
        Condition::PointCloud => g.encode_values(store, ps),
        Condition::Zero => zero_tokens(cfg.model_d_cond),
        Condition::Category => {
            let table = store.value(embed);
            let k = cfg.model_cond_tokens;
            let mut labels = vec![label; k];
            if let Some(p) = partner_label {
                labels.extend(std::iter::repeat(p).take(k));
            }
            let mut out = Arr::zeros(ndarray::IxDyn(&[labels.len(), cfg.model_d_cond]));
            for (r, &l) in labels.iter().enumerate() {
                for c in 0..cfg.model_d_cond {
                    out[[r, c]] = table[[l, c]];
                }
            }
            out
        }
    }
}

/// Feature alignment: train a fresh backbone and projector to match the
/// frozen diffusion features of the paired rendered image.
pub fn stage2_train(cfg: &RunConfig, corpus: &Corpus, stage1_ckpt: &Path, out_dir: &Path, quiet: bool) -> Result<StageOutput> {
    check_corpus(cfg, corpus)?;
    let mut store = ParamStore::new();
    let unet = UNet::build(&mut store, &mut rng::stream(cfg.seed, "init.unet", 0), "unet", cfg.unet_spec());
    let embed = store.register(
        "cond.embed",
        Init::normal(&mut rng::stream(cfg.seed, "init.embed", 0), &[cfg.data_categories, cfg.model_d_cond], 0.5),
    );
    let g = ConditionEncoder::build(&mut store, &mut rng::stream(cfg.seed, "init.g", 0), "g", cfg.encoder_spec());
    load_into(&mut store, stage1_ckpt, &["unet.", "cond.", "g."])?;
    // the backbone and projector start from scratch, not from earlier weights
    let f = Backbone::build(&mut store, &mut rng::stream(cfg.seed, "init.f", 0), "f", cfg.encoder_spec());
    let s = Projector::build(&mut store, &mut rng::stream(cfg.seed, "init.s", 0), "s", cfg.model_d_model, cfg.projector_spec());

    let trainable: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("f.") || n.starts_with("s."))
        .map(str::to_string)
        .collect();
    let plan = FreezePlan::from_names(trainable);

    let patches = patchify_split(&corpus.train, cfg.geom_groups, cfg.geom_group_size, cfg.geom_fps_random_start, cfg.seed)?;
    let spec = LoopSpec {
        label: "stage2",
        seed: cfg.seed,
        opt: &cfg.stage2,
        train_len: corpus.train.len(),
        views: cfg.data_views,
        t_range: (0, 0), // extraction always runs at the noise-free embedding
        augment: cfg.stage2_augment,
        mix_ratio: cfg.geom_mix_ratio,
        groups: cfg.geom_groups,
        quiet,
    };
    let history = run_training_loop(&spec, &mut store, &plan, |store, items, slot| {
        let item = &items[slot];
        let rec = &corpus.train[item.idx];
        let (ps, img, partner_idx) = resolve_item(items, slot, &corpus.train, &patches, cfg.stage2_augment)?;
        let cond = condition_values(
            cfg,
            store,
            &g,
            embed,
            &ps,
            rec.category,
            partner_idx.map(|p| corpus.train[p].category),
        );
        let target = extract_features(&unet, store, &img.to_chw(), &cond, cfg.stage2_tap)?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (tokens, _) = f.forward(&mut tape, &bound, &ps);
        let loss = match (cfg.stage2_alignment, item.partner_slot.is_some()) {
            (Alignment::TokenWise, false) => {
                let proj = s.forward_tokens(&mut tape, &bound, tokens);
                alignment_loss_tokens(&mut tape, proj, &target)?
            }
            _ => {
                let proj = s.forward_pooled(&mut tape, &bound, tokens);
                alignment_loss(&mut tape, proj, &target)?
            }
        };
        let value = tape.value(loss)[[0]] as f64;
        let mut grads = tape.backward(loss);
        Ok((value, bound.grads(&mut grads)))
    })?;
    let ckpt = save_checkpoint(
        &store,
        |n| n.starts_with("f.") || n.starts_with("s."),
        &out_dir.join("stage2.ckpt"),
        &loss_meta("stage2", cfg, &history),
    )?;
    Ok(StageOutput { store, ckpt, loss_history: history })
}
