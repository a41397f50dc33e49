//! One module per CLI verb. Each `run` takes resolved inputs (config,
//! paths) and returns a classified error; process concerns (arg parsing,
//! exit codes) stay in `main`.

pub mod ablate;
pub mod eval;
pub mod gen_data;
pub mod inspect;
pub mod project;
pub mod train;

/// Progress printing that honors `--quiet`.
#[derive(Debug, Clone, Copy)]
pub struct Ui {
    pub quiet: bool,
}

impl Ui {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}
