//! End-to-end steps of one experiment run: generate, train, score,
//! evaluate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::{DataSource, ExperimentConfig, Stage};
use crate::dataset::{generate_benchmark, DigitSource, ImageSample, RawDigits, Role, Splits};
use crate::error::{Error, Result};
use crate::evaluation::{auroc, EvalRecord};
use crate::regressor::{train_regressor_with, RegressorParams};
use crate::scoring::{score_many, Models, Strategy};
use crate::vae::{train_vae_with, TrainOutcome, VaeParams};

pub fn digit_source(config: &ExperimentConfig) -> Result<DigitSource> {
    Ok(match &config.source {
        DataSource::Synthetic => DigitSource::Synthetic,
        DataSource::Idx { images, labels } => DigitSource::Raw(RawDigits::read_files(images, labels)?),
    })
}

pub fn generate_data(config: &ExperimentConfig) -> Result<Splits> {
    config.validate()?;
    let source = digit_source(config)?;
    generate_benchmark(
        &source,
        &config.split,
        &config.counts,
        &config.noise,
        config.stage_seed(Stage::Data),
    )
}

pub fn train_vae_stage(
    config: &ExperimentConfig,
    splits: &Splits,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<VaeParams>> {
    train_vae_with(&splits.train_vae, &config.vae_arch(), &config.vae_train(), on_epoch)
}

pub fn train_regressor_stage(
    config: &ExperimentConfig,
    splits: &Splits,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<RegressorParams>> {
    train_regressor_with(&splits.train_reg, &config.reg_arch(), &config.reg_train(), on_epoch)
}

/// One line of `scores.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRow {
    pub image_id: u64,
    pub digit: u8,
    pub role: Role,
    pub strategy: Strategy,
    pub score: f64,
}

pub const SCORES_HEADER: &str = "image_id,digit,role,strategy,score";

/// Scores every test image under `strategies`, image-major.
pub fn score_images(
    images: &[ImageSample],
    strategies: &[Strategy],
    models: &Models<'_>,
    config: &ExperimentConfig,
) -> Result<Vec<ScoreRow>> {
    let scoring = config.scoring();
    let mut rows = Vec::with_capacity(images.len() * strategies.len());
    for s in images {
        let scores = score_many(&s.pixels, s.id, strategies, models, &scoring).map_err(|e| Error::Image {
            id: s.id,
            source: Box::new(e),
        })?;
        rows.extend(scores.into_iter().map(|a| ScoreRow {
            image_id: s.id,
            digit: s.digit,
            role: s.role,
            strategy: a.strategy,
            score: a.value,
        }));
    }
    Ok(rows)
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for r in rows {
        // `{:?}` prints the shortest string that round-trips.
        writeln!(out, "{},{},{},{},{:?}", r.image_id, r.digit, r.role, r.strategy, r.score).expect("string write");
    }
    out
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SCORES_HEADER) {
        return Err(Error::InvalidArgument(format!("scores file must start with `{SCORES_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::InvalidArgument(format!("scores line {}: bad {what}", i + 2));
            let cols: Vec<&str> = line.trim().split(',').collect();
            if cols.len() != 5 {
                return Err(bad("column count"));
            }
            Ok(ScoreRow {
                image_id: cols[0].parse().map_err(|_| bad("image_id"))?,
                digit: cols[1].parse().map_err(|_| bad("digit"))?,
                role: cols[2].parse().map_err(|_| bad("role"))?,
                strategy: cols[3].parse().map_err(|_| bad("strategy"))?,
                score: cols[4].parse().map_err(|_| bad("score"))?,
            })
        })
        .collect()
}

/// Known-anomaly digit of a scored test set, if one is present.
pub fn known_digit(rows: &[ScoreRow]) -> Option<u8> {
    rows.iter().find(|r| r.role == Role::KnownAnomaly).map(|r| r.digit)
}

/// AUROC per strategy, in strategy order.
pub fn auroc_by_strategy(rows: &[ScoreRow]) -> Result<Vec<(Strategy, f64)>> {
    let mut groups: BTreeMap<Strategy, Vec<EvalRecord>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.strategy).or_default().push(EvalRecord {
            image_id: r.image_id,
            score: r.score,
            is_anomaly: r.role.is_anomaly(),
        });
    }
    groups
        .into_iter()
        .map(|(s, records)| Ok((s, auroc(&records)?)))
        .collect()
}
