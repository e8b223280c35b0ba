//! Trains on the synthetic corpus and prints one line per epoch plus the final confusions.
//!
//! `cargo run --release -p pictor-core --example toy_train -- [count] [epochs] [key=value ...]`
//! where each `key=value` is a run configuration override such as `stop_accuracy=0.9`.

use pictor::dataset::{Manifest, Split, Task};
use pictor::synth::{SynthConfig, SynthCorpus};
use pictor::train::{train, EpochLog, RunConfig, TrainObserver};

struct Print;

impl TrainObserver for Print {
    fn on_epoch(&mut self, log: &EpochLog) {
        let eval = log.eval.map(|e| format!(" eval {:.3} {:.3} {:.3} avg {:.3}", e[0], e[1], e[2], e[3]));
        println!("epoch {:>2} loss {:.4} {:.0} s{}", log.epoch, log.mean_loss, log.seconds, eval.unwrap_or_default());
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let count = args.first().map(|s| s.parse()).transpose()?.unwrap_or(1200);
    let epochs = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let corpus = SynthCorpus::new(SynthConfig { count, ..SynthConfig::default() });
    let manifest = Manifest::build(corpus.metadata_csv().as_bytes(), "", 10, 0)?;
    println!("classes {:?}, {} training images", manifest.num_classes(), manifest.split(Split::Train).len());

    let mut text = format!("epochs = {epochs}\n");
    for a in args.iter().skip(2) {
        text.push_str(a);
        text.push('\n');
    }
    let cfg = RunConfig::from_kv_str(&text)?;
    let out = train(&cfg, &manifest, &corpus, None, &mut Print)?;
    println!("best average {:.4}", out.best_average);
    if let Some(r) = out.last_report {
        for t in Task::ALL {
            println!("{t} confusion (rows = truth):");
            for row in &r.confusion[t.index()] {
                println!("  {row:?}");
            }
        }
    }
    Ok(())
}
