use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dragdrop_core::io::{load_label, VolumeFormat};
use dragdrop_core::metrics::{patient_counts, pixel_counts, CSV_HEADER};
use dragdrop_core::{lesion_level_metrics, CaseRef, ConfusionCounts, DetectionReport, LabelVolume, Level, MatchCriterion};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{read_text, write_file, CliError, CliResult, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Pixel,
    Lesion,
    Patient,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["pred", "cases"])))]
pub struct EvaluateArgs {
    /// Predicted label map (single-case mode).
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Voxels excluded from pixel-level counting, e.g. the uncertain ring.
    #[arg(long, requires = "pred")]
    pub ignore: Option<PathBuf>,
    /// JSON array of `{"pred", "gt", "ignore"?, "id"?, "meta"?}`; paths are
    /// relative to this file.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub level: LevelArg,
    /// `any_overlap` or `iou:<tau>`.
    #[arg(long, default_value = "any_overlap")]
    pub criterion: MatchCriterion,
    /// Report separately for each value of this `meta` key.
    #[arg(long, requires = "cases")]
    pub group_by: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to the --out extension, else JSON.
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseEntry {
    #[serde(default)]
    id: Option<String>,
    pred: PathBuf,
    gt: PathBuf,
    #[serde(default)]
    ignore: Option<PathBuf>,
    #[serde(default)]
    meta: BTreeMap<String, Value>,
}

struct LoadedCase {
    pred: LabelVolume,
    gt: LabelVolume,
    ignore: Option<LabelVolume>,
    group: String,
}

fn load(path: &Path) -> CliResult<LabelVolume> {
    Ok(load_label(path, VolumeFormat::detect(path))?.0)
}

fn load_case(e: &CaseEntry, base: &Path, group_by: Option<&str>) -> CliResult<LoadedCase> {
    let name = e.id.clone().unwrap_or_else(|| e.pred.display().to_string());
    let pred = load(&base.join(&e.pred))?;
    let gt = load(&base.join(&e.gt))?;
    let ignore = e.ignore.as_ref().map(|p| load(&base.join(p))).transpose()?;
    for (what, other) in std::iter::once(("gt", &gt)).chain(ignore.iter().map(|i| ("ignore", i))) {
        if other.dims() != pred.dims() {
            return Err(CliError::Data(format!(
                "case {name}: {what} dims {:?} differ from pred dims {:?}",
                other.dims().0,
                pred.dims().0
            )));
        }
    }
    let group = match group_by {
        None => String::new(),
        Some(key) => match e.meta.get(key) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => return Err(CliError::Data(format!("case {name}: meta has no key `{key}`"))),
        },
    };
    Ok(LoadedCase { pred, gt, ignore, group })
}

fn levels(arg: LevelArg) -> Vec<Level> {
    match arg {
        LevelArg::Pixel => vec![Level::Pixel],
        LevelArg::Lesion => vec![Level::Lesion],
        LevelArg::Patient => vec![Level::Patient],
        LevelArg::All => vec![Level::Pixel, Level::Lesion, Level::Patient],
    }
}

/// Counts are summed over cases, so pixel Dice is the pooled Dice.
fn reports(cases: &[&LoadedCase], wanted: &[Level], crit: MatchCriterion) -> CliResult<Vec<DetectionReport>> {
    let refs: Vec<CaseRef> = cases.iter().map(|c| CaseRef { pred: &c.pred, gt: &c.gt }).collect();
    let mut out = Vec::new();
    for &level in wanted {
        let r = match level {
            Level::Pixel => {
                let counts = cases
                    .par_iter()
                    .map(|c| {
                        let ignore = c.ignore.as_ref().map(|i| i.nonzero());
                        pixel_counts(&c.pred.nonzero(), &c.gt.nonzero(), ignore.as_ref())
                    })
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter()
                    .fold(ConfusionCounts::default(), |a, b| a + b);
                DetectionReport::from_counts(Level::Pixel, counts)
            }
            Level::Lesion => lesion_level_metrics(&refs, crit)?,
            Level::Patient => DetectionReport::from_counts(Level::Patient, patient_counts(&refs)?),
        };
        out.push(r);
    }
    Ok(out)
}

pub(crate) fn cmd_evaluate(a: EvaluateArgs, run: &mut RunManifest) -> CliResult<()> {
    let (entries, base) = match (&a.cases, &a.pred, &a.gt) {
        (Some(cases), _, _) => {
            run.inputs.push(cases.clone());
            let entries: Vec<CaseEntry> = serde_json::from_str(&read_text(cases)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", cases.display())))?;
            (entries, cases.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        (None, Some(pred), Some(gt)) => (
            vec![CaseEntry {
                id: None,
                pred: pred.clone(),
                gt: gt.clone(),
                ignore: a.ignore.clone(),
                meta: BTreeMap::new(),
            }],
            PathBuf::new(),
        ),
        _ => return Err(CliError::Usage("give --pred and --gt, or --cases".into())),
    };
    if entries.is_empty() {
        return Err(CliError::Data("no cases to evaluate".into()));
    }
    for e in &entries {
        run.inputs.extend([base.join(&e.pred), base.join(&e.gt)]);
        run.inputs.extend(e.ignore.as_ref().map(|i| base.join(i)));
    }
    let loaded = entries
        .par_iter()
        .map(|e| load_case(e, &base, a.group_by.as_deref()))
        .collect::<CliResult<Vec<_>>>()?;

    let mut groups: BTreeMap<&str, Vec<&LoadedCase>> = BTreeMap::new();
    for c in &loaded {
        groups.entry(&c.group).or_default().push(c);
    }
    let wanted = levels(a.level);
    let mut table = Vec::new();
    for (name, cases) in &groups {
        table.push((name.to_string(), cases.len(), reports(cases, &wanted, a.criterion)?));
    }

    let format = a.format.unwrap_or(match &a.out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => ReportFormat::Csv,
        _ => ReportFormat::Json,
    });
    let grouped = a.group_by.is_some();
    let text = match format {
        ReportFormat::Csv => {
            let mut s = String::new();
            if grouped {
                s.push_str("group,");
            }
            s.push_str(CSV_HEADER);
            s.push('\n');
            for (name, _, rs) in &table {
                for r in rs {
                    if grouped {
                        s.push_str(name);
                        s.push(',');
                    }
                    s.push_str(&r.csv_row());
                    s.push('\n');
                }
            }
            s
        }
        ReportFormat::Json => {
            let v = if grouped {
                json!({
                    "group_by": a.group_by,
                    "groups": table
                        .iter()
                        .map(|(name, n, rs)| json!({ "group": name, "cases": n, "reports": rs }))
                        .collect::<Vec<_>>(),
                })
            } else {
                json!({ "cases": loaded.len(), "reports": table[0].2 })
            };
            serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
        }
    };
    match &a.out {
        Some(out) => {
            write_file(out, text)?;
            run.outputs.push(out.clone());
            run.manifest_path = Some(crate::manifest::beside(out));
        }
        None => print!("{text}"),
    }
    Ok(())
}
