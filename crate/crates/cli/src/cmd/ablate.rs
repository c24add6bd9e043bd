//! `gatiaa ablate` — train every model variant on shared data and budget.
//!
//! Generates one planted-signal dataset from the run seed, splits it 80/10
//! by position, trains each variant with identical settings, and writes
//! `ablation.csv` with the best validation correlations per variant. Same
//! seed and config, same table, byte for byte.

use super::{create_out_dir, fmt_opt, write_file, CliError, RunConfig};
use gatiaa_core::model::{Model, ModelSpec, Variant};
use gatiaa_core::synth::generate;
use gatiaa_core::train::train;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let out = create_out_dir(cfg)?;
    print!("{}", cfg.echo("ablate", &[]));

    let graphs = generate(cfg.seed, cfg.ablate_count, &cfg.synth)?;
    let n_train = cfg.ablate_count * 8 / 10;
    let n_val = cfg.ablate_count / 10;
    if n_train == 0 || n_val == 0 {
        return Err(CliError::Usage(format!(
            "ablate.count={} is too small for an 80/10 train/val split",
            cfg.ablate_count
        )));
    }
    let (train_set, rest) = graphs.split_at(n_train);
    let val_set = &rest[..n_val];

    let mut csv = String::from("variant,plcc,srcc\n");
    for variant in Variant::ALL {
        let spec = ModelSpec {
            variant,
            ..cfg.model.clone()
        };
        let mut model: Model<f32> = Model::build(spec, cfg.seed)?;
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.seed;
        tcfg.start_epoch = 0;
        tcfg.checkpoint_dir = None;
        let outcome = train(&mut model, train_set, val_set, &tcfg)?;
        let (plcc_v, srcc_v) = match outcome.best_epoch {
            Some(e) => {
                let r = &outcome.records[e];
                (r.val_plcc, r.val_srcc)
            }
            None => (None, None),
        };
        let blank = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{}\n",
            variant.name(),
            blank(plcc_v),
            blank(srcc_v)
        ));
        println!(
            "variant {}: plcc {} srcc {}",
            variant.name(),
            fmt_opt(plcc_v),
            fmt_opt(srcc_v)
        );
    }
    let path = out.join("ablation.csv");
    write_file(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}
