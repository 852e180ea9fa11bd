//! Toy-scale ablation harness: student architecture, head aggregation and
//! loss variants, each distilled from the same teacher and scored by k-NN
//! and linear probe on held-out data.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distill::{AgCase, Aggregation, AttentionLayers, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::{extract_features, knn_classify, linear_probe, EvalConfig};
use crate::io::{Dataset, ModelFile, RunConfig};
use crate::train::{run_distillation, DistillSetup, StudentState};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Architecture,
    Aggregation,
    Loss,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [AblationAxis::Architecture, AblationAxis::Aggregation, AblationAxis::Loss];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Architecture => "architecture",
            AblationAxis::Aggregation => "aggregation",
            AblationAxis::Loss => "loss",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}`")))
    }
}

/// One line of the comparison table. Metric columns are empty for rows
/// that were skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub student: String,
    pub ag_case: String,
    pub lambda: Option<f64>,
    pub aggregation: String,
    pub attention_layers: String,
    pub align_patch_tokens: bool,
    pub epochs: usize,
    pub status: String,
    pub final_loss_pa: Option<f64>,
    pub final_loss_ag: Option<f64>,
    pub knn_accuracy: Option<f64>,
    pub linear_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

/// Shared inputs of every run of an ablation.
#[derive(Clone, Copy, Debug)]
pub struct AblationInputs<'a> {
    pub config: &'a RunConfig,
    pub teacher: &'a ModelFile,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

/// Short architecture tag such as `L4-H2x8-P16`.
pub fn arch_tag(c: &ViTConfig) -> String {
    format!("L{}-H{}x{}-P{}", c.layers, c.heads, c.head_dim, c.patch_size)
}

struct Variant {
    name: String,
    student: ViTConfig,
    distill: DistillConfig,
    /// `None` scores the untrained student.
    train: bool,
}

fn case_of(teacher: &ViTConfig, student: &ViTConfig, d: &DistillConfig) -> AgCase {
    d.case.unwrap_or_else(|| {
        AgCase::detect(teacher.heads, student.heads, teacher.num_patches(), student.num_patches())
    })
}

/// Architecture variants keep the embedding width where possible.
fn architecture_variants(base: &ViTConfig) -> Vec<(String, ViTConfig)> {
    let mut out = vec![("base".to_string(), base.clone())];
    if base.head_dim.is_multiple_of(2) {
        let mut c = base.clone();
        c.heads *= 2;
        c.head_dim /= 2;
        out.push(("double_heads".into(), c));
    }
    if base.patch_size.is_multiple_of(2) {
        let mut c = base.clone();
        c.patch_size /= 2;
        out.push(("half_patch".into(), c));
    }
    if base.layers > 1 {
        let mut c = base.clone();
        c.layers = base.layers.div_ceil(2);
        out.push(("half_depth".into(), c));
    }
    out
}

fn variants(axis: AblationAxis, cfg: &RunConfig) -> Vec<Variant> {
    let base = &cfg.distill;
    let with = |f: &dyn Fn(&mut DistillConfig)| {
        let mut d = base.clone();
        f(&mut d);
        d
    };
    let student = &cfg.vit_student;
    let mut out = Vec::new();
    match axis {
        AblationAxis::Architecture => {
            for (name, s) in architecture_variants(student) {
                out.push(Variant {
                    name: format!("{name}/random_init"),
                    student: s.clone(),
                    distill: base.clone(),
                    train: false,
                });
                out.push(Variant {
                    name: format!("{name}/pa"),
                    student: s.clone(),
                    distill: with(&|d| d.lambda = 0.0),
                    train: true,
                });
                out.push(Variant {
                    name: format!("{name}/pa_ag"),
                    student: s,
                    distill: base.clone(),
                    train: true,
                });
            }
        }
        AblationAxis::Aggregation => {
            out.push(Variant {
                name: "pa".into(),
                student: student.clone(),
                distill: with(&|d| d.lambda = 0.0),
                train: true,
            });
            for a in [Aggregation::LogSum, Aggregation::Mean, Aggregation::Min, Aggregation::Max] {
                out.push(Variant {
                    name: a.name().into(),
                    student: student.clone(),
                    distill: with(&|d| d.aggregation = a),
                    train: true,
                });
            }
        }
        AblationAxis::Loss => {
            out.push(Variant {
                name: "pa".into(),
                student: student.clone(),
                distill: with(&|d| d.lambda = 0.0),
                train: true,
            });
            out.push(Variant {
                name: "pa_ag".into(),
                student: student.clone(),
                distill: base.clone(),
                train: true,
            });
            out.push(Variant {
                name: "pa_ag_all_layers".into(),
                student: student.clone(),
                distill: with(&|d| d.attention_layers = AttentionLayers::All),
                train: true,
            });
            out.push(Variant {
                name: "pa_ag_patch_tokens".into(),
                student: student.clone(),
                distill: with(&|d| d.align_patch_tokens = true),
                train: true,
            });
        }
    }
    out
}

/// Why a loss variant cannot run with this teacher/student pair.
fn unsupported(teacher: &ViTConfig, student: &ViTConfig, d: &DistillConfig) -> Option<String> {
    if d.attention_layers == AttentionLayers::All && d.lambda > 0.0 && teacher.layers != student.layers {
        return Some(format!(
            "skipped: all-layer guidance needs equal depth ({} vs {})",
            teacher.layers, student.layers
        ));
    }
    if d.align_patch_tokens && teacher.num_patches() != student.num_patches() {
        return Some(format!(
            "skipped: patch-token alignment needs equal grids ({} vs {} patches)",
            teacher.num_patches(),
            student.num_patches()
        ));
    }
    None
}

/// k-NN and linear-probe accuracy of a model's class-token features.
pub fn score(model: &ModelFile, train: &Dataset, val: &Dataset, eval: &EvalConfig) -> Result<(f64, f64)> {
    let bank = extract_features(model, train)?;
    let query = extract_features(model, val)?;
    Ok((knn_classify(&bank, &query, &eval.knn)?, linear_probe(&bank, &query, &eval.probe)?))
}

/// Runs every variant of `axis` in order. With `out_dir`, each trained
/// variant writes its metrics and student under `out_dir/<variant>/`.
pub fn run_ablation(axis: AblationAxis, inputs: &AblationInputs, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let cfg = inputs.config;
    cfg.validate()?;
    let teacher_cfg = &inputs.teacher.config;
    let mut rows = Vec::new();
    for v in variants(axis, cfg) {
        let start = Instant::now();
        log::info!("ablation {axis}: {}", v.name);
        let mut row = AblationRow {
            axis: axis.name().into(),
            variant: v.name.clone(),
            student: arch_tag(&v.student),
            ag_case: case_of(teacher_cfg, &v.student, &v.distill).name().into(),
            lambda: v.train.then_some(v.distill.lambda),
            aggregation: v.distill.aggregation.name().into(),
            attention_layers: v.distill.attention_layers.name().into(),
            align_patch_tokens: v.distill.align_patch_tokens,
            epochs: if v.train { cfg.train.total_epochs } else { 0 },
            status: "ok".into(),
            final_loss_pa: None,
            final_loss_ag: None,
            knn_accuracy: None,
            linear_accuracy: None,
            wall_time_s: 0.0,
        };
        if let Some(reason) = unsupported(teacher_cfg, &v.student, &v.distill) {
            row.status = reason;
            rows.push(row);
            continue;
        }
        let model = if v.train {
            let setup = DistillSetup {
                teacher: inputs.teacher,
                data: inputs.train,
                distill: &v.distill,
                train: &cfg.train,
            };
            let dir = out_dir.map(|d| d.join(v.name.replace('/', "_")));
            let outcome = run_distillation(&setup, &v.student, dir.as_deref())?;
            if let Some(last) = outcome.metrics.last() {
                row.final_loss_pa = Some(last.loss_pa);
                row.final_loss_ag = Some(last.loss_ag);
            }
            outcome.student.to_model()
        } else {
            StudentState::init(&v.student, teacher_cfg.embed_dim(), &v.distill, cfg.train.seed)?.to_model()
        };
        let (knn, lin) = score(&model, inputs.train, inputs.val, &cfg.eval)?;
        row.knn_accuracy = Some(knn);
        row.linear_accuracy = Some(lin);
        row.wall_time_s = start.elapsed().as_secs_f64();
        rows.push(row);
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// The table as CSV text with a header line.
pub fn to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<AblationRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> RunConfig {
        RunConfig::from_json(
            r#"{
            "vit_teacher": {"image_size": 16, "patch_size": 4, "layers": 2, "heads": 2, "head_dim": 4},
            "vit_student": {"image_size": 16, "patch_size": 8, "layers": 1, "heads": 1, "head_dim": 4}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn variant_lists() {
        let c = config();
        let names = |a| variants(a, &c).into_iter().map(|v| v.name).collect::<Vec<_>>();
        assert_eq!(names(AblationAxis::Aggregation), ["pa", "log_sum", "mean", "min", "max"]);
        assert_eq!(names(AblationAxis::Loss), ["pa", "pa_ag", "pa_ag_all_layers", "pa_ag_patch_tokens"]);
        // head_dim 4 splits, patch 8 halves, a single layer cannot.
        assert_eq!(variants(AblationAxis::Architecture, &c).len(), 9);
    }

    #[test]
    fn mismatched_loss_variants_are_skipped() {
        let c = config();
        let all = variants(AblationAxis::Loss, &c);
        let reasons: Vec<_> = all
            .iter()
            .map(|v| unsupported(&c.vit_teacher, &v.student, &v.distill))
            .collect();
        assert!(reasons[0].is_none() && reasons[1].is_none());
        assert!(reasons[2].as_deref().unwrap().contains("equal depth"));
        assert!(reasons[3].as_deref().unwrap().contains("equal grids"));
    }
}
