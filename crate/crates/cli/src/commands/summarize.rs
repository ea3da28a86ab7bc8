//! `summarize`: posterior reports and plot-ready draw tables.

use super::{find_chain_bases, setup};
use anyhow::{bail, Result};
use ddcmix::mcmc::DrawStore;
use ddcmix::postprocess::{summarize, PosteriorReport};
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Serialize)]
struct SummaryFile {
    config_hash: String,
    chains: Vec<String>,
    per_chain: Vec<PosteriorReport>,
    merged: PosteriorReport,
}

pub fn run(
    config_arg: &str,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    burn_in: usize,
    thin: usize,
) -> Result<()> {
    let (_cfg, hash, _built, out_dir) = setup(config_arg, out)?;
    let data_dir = data.unwrap_or_else(|| out_dir.clone());
    let bases = find_chain_bases(&data_dir)?;
    let stores: Vec<DrawStore> = bases
        .iter()
        .map(|b| DrawStore::read(&data_dir, b))
        .collect::<ddcmix::Result<Vec<_>>>()?;
    if stores.iter().all(|s| s.draws.is_empty()) {
        bail!("all chain stores are empty");
    }

    let per_chain = stores
        .iter()
        .map(|s| summarize(s, burn_in, thin))
        .collect::<ddcmix::Result<Vec<_>>>()?;
    let mut merged = stores[0].clone();
    for s in &stores[1..] {
        merged.draws.extend(s.draws.iter().cloned());
    }
    let merged_report = summarize(&merged, burn_in, thin)?;

    serde_json::to_writer_pretty(
        std::fs::File::create(out_dir.join("summary.json"))?,
        &SummaryFile {
            config_hash: hash,
            chains: bases.clone(),
            per_chain,
            merged: merged_report,
        },
    )?;

    // Plot-ready tables: parameter scatter and functional traces.
    let mut scatter = std::io::BufWriter::new(std::fs::File::create(
        out_dir.join("theta_scatter.csv"),
    )?);
    let p = stores[0]
        .draws
        .first()
        .map_or(stores[0].meta.d_theta, |d| d.theta_renorm.len());
    let mut header = vec!["chain".to_string(), "iter".to_string(), "m".to_string()];
    header.extend((1..=p).map(|i| format!("theta_renorm_{i}")));
    header.push("s".into());
    writeln!(scatter, "{}", header.join(","))?;
    for (c, store) in stores.iter().enumerate() {
        for d in store.draws.iter().skip(burn_in).step_by(thin.max(1)) {
            let mut row = vec![c.to_string(), d.iter.to_string(), d.m.to_string()];
            row.extend(d.theta_renorm.iter().map(|v| format!("{v:.10e}")));
            row.push(format!("{:.10e}", d.s));
            writeln!(scatter, "{}", row.join(","))?;
        }
    }
    scatter.flush()?;

    let names = &stores[0].meta.functional_names;
    if !names.is_empty() {
        let mut traces = std::io::BufWriter::new(std::fs::File::create(
            out_dir.join("functional_traces.csv"),
        )?);
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend(names.iter().map(|n| format!("functional_{n}")));
        writeln!(traces, "{}", header.join(","))?;
        for (c, store) in stores.iter().enumerate() {
            for d in store.draws.iter().skip(burn_in).step_by(thin.max(1)) {
                let mut row = vec![c.to_string(), d.iter.to_string()];
                row.extend(d.functionals.iter().map(|v| format!("{v:.10e}")));
                writeln!(traces, "{}", row.join(","))?;
            }
        }
        traces.flush()?;
    }
    println!("summarize: wrote summary.json and plot tables to {}", out_dir.display());
    Ok(())
}
