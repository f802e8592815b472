//! The iterative loop: collect real transitions, fit the variational world
//! model, draw one reward-model sample, and train the policy inside it.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::agent::{collect_real, evaluate_greedy, train_policy_in_sim, ModelEnv, PolicyNet, SimSchedule};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::ObjectWorld;
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::world_model::{train_model, Dataset, TransitionRecord, WorldModel};

pub const REPORT_HEADER: &str = "iteration,real_return_mean,model_nll,reward_acc,sim_return_mean,seconds,frame_acc";

/// Per-iteration statistics. Model metrics are measured on the transitions
/// collected in that iteration, before the model is fitted to them.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iteration: usize,
    pub real_return_mean: f64,
    pub model_nll: f64,
    pub reward_acc: f64,
    pub sim_return_mean: f64,
    pub seconds: f64,
    pub frame_acc: f64,
}

impl IterationRow {
    fn csv_line(&self, with_time: bool) -> String {
        let seconds = if with_time { format!("{:.3}", self.seconds) } else { "0".to_string() };
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.real_return_mean, self.model_nll, self.reward_acc, self.sim_return_mean, seconds, self.frame_acc
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub rows: Vec<IterationRow>,
    /// Returns of the final greedy evaluation episodes.
    pub final_returns: Vec<f64>,
}

impl TrainingReport {
    pub fn final_mean(&self) -> f64 {
        if self.final_returns.is_empty() {
            return f64::NAN;
        }
        self.final_returns.iter().sum::<f64>() / self.final_returns.len() as f64
    }

    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// CSV with the wall-clock column zeroed: identical for identical runs.
    pub fn canonical_csv(&self) -> String {
        self.render(false)
    }

    fn render(&self, with_time: bool) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line(with_time));
            s.push('\n');
        }
        s
    }

    pub fn final_csv(&self) -> String {
        let mut s = String::from("episode,return\n");
        for (i, r) in self.final_returns.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, r);
        }
        s
    }
}

/// Resumable state of one run.
#[derive(Debug, Clone)]
pub struct Trainer<S: Scalar = f32> {
    config: RunConfig,
    env: ObjectWorld,
    model: WorldModel<S>,
    policy: PolicyNet<S>,
    dataset: Dataset<S>,
    root: Rng,
    next_iteration: usize,
    report: TrainingReport,
    out_dir: Option<PathBuf>,
    sample_ids: Vec<Vec<u64>>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: RunConfig, root: Rng) -> Result<Self> {
        config.validate()?;
        let env = ObjectWorld::new(config.env.clone())?;
        let model = WorldModel::new(&config.env, &config.effective_model(), &mut root.named("model-init", 0))?;
        let policy = PolicyNet::new(model.dims().obs_shape(), config.env.actions(), &config.policy, &mut root.named("policy-init", 0))?;
        Ok(Self {
            config,
            env,
            model,
            policy,
            dataset: Dataset::new(),
            root,
            next_iteration: 1,
            report: TrainingReport::default(),
            out_dir: None,
            sample_ids: Vec::new(),
        })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let root = Rng::from_state_bytes(&ckpt.rng_state)?;
        if root.seed() != ckpt.seed {
            return Err(Error::Format("checkpoint seed does not match its RNG state".into()));
        }
        let mut t = Self::new(config, root)?;
        load_store(ckpt, "model", t.model.params_mut())?;
        let (step, m, v) = load_optimizer(ckpt, "model", t.model.params())?;
        t.model.optimizer_mut().restore(step, m, v)?;
        load_store(ckpt, "policy", t.policy.params_mut())?;
        let (step, m, v) = load_optimizer(ckpt, "policy", t.policy.params())?;
        t.policy.optimizer_mut().restore(step, m, v)?;
        t.next_iteration = counter(ckpt, "loop.next_iteration")? as usize;
        if let Some(actions) = ckpt.get("data.action") {
            let obs = ckpt.require::<S>("data.obs")?;
            let next = ckpt.require::<S>("data.next")?;
            let rewards = ckpt.require::<S>("data.reward_class")?;
            for i in 0..actions.len() {
                t.dataset.push(TransitionRecord {
                    obs_stack: obs.batch_item(i)?,
                    action: actions.data()[i] as usize,
                    reward_class: rewards.data()[i].as_f64() as usize,
                    next_frame: next.batch_item(i)?,
                });
            }
        }
        Ok(t)
    }

    /// Write reports and a checkpoint into `dir` as the run progresses.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), self.config.to_json())?;
        let report = dir.join("report.csv");
        if self.next_iteration == 1 || !report.exists() {
            fs::write(&report, format!("{REPORT_HEADER}\n"))?;
        }
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &WorldModel<S> {
        &self.model
    }

    pub fn policy(&self) -> &PolicyNet<S> {
        &self.policy
    }

    pub fn dataset(&self) -> &Dataset<S> {
        &self.dataset
    }

    pub fn env(&self) -> &ObjectWorld {
        &self.env
    }

    pub fn report(&self) -> &TrainingReport {
        &self.report
    }

    /// Distinct reward-sample ids queried in each completed iteration.
    pub fn sample_ids(&self) -> &[Vec<u64>] {
        &self.sample_ids
    }

    pub fn next_iteration(&self) -> usize {
        self.next_iteration
    }

    pub fn is_finished(&self) -> bool {
        self.next_iteration > self.config.schedule.iterations
    }

    pub fn run_iteration(&mut self) -> Result<IterationRow> {
        let i = self.next_iteration;
        self.iteration(i).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("iteration {i}: {msg}")),
            other => other,
        })
    }

    fn iteration(&mut self, i: usize) -> Result<IterationRow> {
        let start = Instant::now();
        let schedule = self.config.schedule.clone();
        let it = self.root.named("iteration", i as u64);

        let before = self.dataset.len();
        let returns = collect_real(&self.policy, &self.env, schedule.real_steps, &mut self.dataset, &mut it.named("collect", 0))?;
        let fresh = &self.dataset.records()[before..];
        let held_out = self.model.evaluate(fresh)?;
        if !held_out.nll.is_finite() {
            return Err(Error::NonFinite(format!("held-out model loss is {}", held_out.nll)));
        }

        train_model(&mut self.model, &self.dataset, schedule.model_steps(i), &it.named("model", 0))?;

        let sample =
            if self.model.config().noise { self.model.draw_reward_sample(&mut it.named("posterior", 0)) } else { self.model.mean_sample() };
        let sim = ModelEnv::new(&self.model, &sample, &self.config.env.reward_buckets)?;
        let sim_report = train_policy_in_sim(
            &mut self.policy,
            &sim,
            &self.dataset,
            SimSchedule { steps: schedule.sim_steps, horizon: schedule.rollout_horizon, update_frequency: schedule.update_frequency },
            &self.config.policy,
            &mut it.named("sim", 0),
        )?;
        self.sample_ids.push(sim_report.sample_ids.clone());

        let row = IterationRow {
            iteration: i,
            real_return_mean: returns.iter().sum::<f64>() / returns.len() as f64,
            model_nll: held_out.nll,
            reward_acc: held_out.reward_accuracy,
            sim_return_mean: sim_report.mean_return(),
            seconds: start.elapsed().as_secs_f64(),
            frame_acc: held_out.frame_accuracy,
        };
        self.report.rows.push(row.clone());
        self.next_iteration += 1;
        if let Some(dir) = &self.out_dir {
            let mut f = OpenOptions::new().append(true).open(dir.join("report.csv"))?;
            writeln!(f, "{}", row.csv_line(true))?;
            self.checkpoint()?.save(&dir.join("checkpoint.evde"))?;
        }
        Ok(row)
    }

    /// Run the remaining iterations and the final greedy evaluation.
    pub fn run(mut self) -> Result<TrainingReport> {
        while !self.is_finished() {
            self.run_iteration()?;
        }
        self.finish()
    }

    /// Final greedy evaluation; consumes the trainer.
    pub fn finish(mut self) -> Result<TrainingReport> {
        let returns = evaluate_greedy(&self.policy, &self.env, self.config.schedule.eval_episodes, &mut self.root.named("eval", 0))?;
        self.report.final_returns = returns;
        if let Some(dir) = &self.out_dir {
            fs::write(dir.join("final_eval.csv"), self.report.final_csv())?;
        }
        Ok(self.report)
    }

    /// Everything needed to continue the run bit-identically (in single
    /// precision): parameters, masks, optimizer state, the real dataset and
    /// the loop position.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.root.seed(), self.root.state_bytes());
        c.insert("loop.next_iteration", &Tensor::<f32>::scalar(counter_value(self.next_iteration as u64)?))?;
        save_store(&mut c, "model", self.model.params(), self.model.optimizer())?;
        save_store(&mut c, "policy", self.policy.params(), self.policy.optimizer())?;
        let recs = self.dataset.records();
        if !recs.is_empty() {
            c.insert("data.obs", &Tensor::stack(&recs.iter().map(|r| &r.obs_stack).collect::<Vec<_>>())?)?;
            c.insert("data.next", &Tensor::stack(&recs.iter().map(|r| &r.next_frame).collect::<Vec<_>>())?)?;
            c.insert("data.action", &Tensor::<f32>::from_fn(&[recs.len()], |i| recs[i].action as f32))?;
            c.insert("data.reward_class", &Tensor::<f32>::from_fn(&[recs.len()], |i| recs[i].reward_class as f32))?;
        }
        Ok(c)
    }
}

/// Largest integer that single precision represents exactly.
const MAX_COUNTER: u64 = 1 << 24;

fn counter_value(v: u64) -> Result<f32> {
    if v > MAX_COUNTER {
        return Err(Error::Format(format!("counter {v} exceeds checkpoint range")));
    }
    Ok(v as f32)
}

fn counter(c: &Checkpoint, name: &str) -> Result<u64> {
    let t = c.require::<f32>(name)?;
    Ok(t.item()? as u64)
}

fn save_store<S: Scalar>(c: &mut Checkpoint, prefix: &str, store: &ParamStore<S>, opt: &Adam<S>) -> Result<()> {
    c.insert(format!("{prefix}.opt.step"), &Tensor::<f32>::scalar(counter_value(opt.steps_taken())?))?;
    for (id, p) in store.iter() {
        c.insert(format!("{prefix}.{}", p.name), &p.value)?;
        if let Some(mask) = &p.mask {
            c.insert(format!("{prefix}.{}.mask", p.name), mask)?;
        }
        let (m, v) = opt.moments(id);
        c.insert(format!("{prefix}.opt.m.{}", p.name), m)?;
        c.insert(format!("{prefix}.opt.v.{}", p.name), v)?;
    }
    Ok(())
}

fn load_store<S: Scalar>(c: &Checkpoint, prefix: &str, store: &mut ParamStore<S>) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.mask.clone())).collect();
    for (id, name, mask) in ids {
        let value = c.require::<S>(&format!("{prefix}.{name}"))?;
        if value.shape() != store.get(id).shape() {
            return Err(Error::Format(format!("{prefix}.{name} has shape {:?}, expected {:?}", value.shape(), store.get(id).shape())));
        }
        if let Some(mask) = mask {
            if c.require::<S>(&format!("{prefix}.{name}.mask"))? != mask {
                return Err(Error::Format(format!("{prefix}.{name} mask differs from the configured structure")));
            }
        }
        store.set(id, value)?;
    }
    Ok(())
}

type OptState<S> = (u64, Vec<Tensor<S>>, Vec<Tensor<S>>);

fn load_optimizer<S: Scalar>(c: &Checkpoint, prefix: &str, store: &ParamStore<S>) -> Result<OptState<S>> {
    let step = counter(c, &format!("{prefix}.opt.step"))?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, p) in store.iter() {
        m.push(c.require::<S>(&format!("{prefix}.opt.m.{}", p.name))?);
        v.push(c.require::<S>(&format!("{prefix}.opt.v.{}", p.name))?);
    }
    Ok((step, m, v))
}

/// Run the full loop from scratch. With `out_dir`, the resolved config,
/// per-iteration CSV rows, a checkpoint after every iteration and the final
/// evaluation are written there.
pub fn run_evade_simple<S: Scalar>(config: &RunConfig, rng: Rng, out_dir: Option<&Path>) -> Result<TrainingReport> {
    let mut trainer = Trainer::<S>::new(config.clone(), rng)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir)?;
    }
    trainer.run()
}
