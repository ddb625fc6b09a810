//! Flat `key=value` run configuration.
//!
//! Every section reads its keys out of a shared [`KeyValues`] map; keys
//! left over once all sections have taken theirs are rejected. Writing a
//! config back out lists every key with its resolved value, so the echoed
//! file reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::network::NetworkConfig;
use crate::scene_sim::{parse_key_values, SceneConfig};
use crate::training::TrainConfig;

/// Pending `key=value` pairs.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_key_values(text, "config").map_err(|e| Error::Config(e.to_string()))?;
        Ok(KeyValues { map })
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        KeyValues {
            map: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    /// Adds or replaces a pair; later overrides win.
    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Parses `key` into `slot` if present.
    pub fn take<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(raw) = self.map.remove(key) {
            *slot = raw.parse().map_err(|e: T::Err| Error::InvalidValue {
                key: key.to_string(),
                msg: format!("`{raw}`: {e}"),
            })?;
        }
        Ok(())
    }

    /// Like [`take`](Self::take) for values with a custom parser.
    pub fn take_with<T>(&mut self, key: &str, slot: &mut T, parse: impl FnOnce(&str) -> Result<T>) -> Result<()> {
        if let Some(raw) = self.map.remove(key) {
            *slot = parse(&raw).map_err(|e| Error::InvalidValue {
                key: key.to_string(),
                msg: format!("`{raw}`: {e}"),
            })?;
        }
        Ok(())
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.map.into_keys().next() {
            Some(k) => Err(Error::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

/// Ordered `key=value` writer.
#[derive(Debug, Default)]
pub struct ConfigWriter {
    out: String,
}

impl ConfigWriter {
    pub fn section(&mut self, title: &str) {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("# {title}\n"));
    }

    pub fn put(&mut self, key: &str, value: impl Display) {
        self.out.push_str(&format!("{key}={value}\n"));
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// One section of the flat config.
pub trait ConfigSection {
    fn apply(&mut self, kv: &mut KeyValues) -> Result<()>;
    fn write(&self, w: &mut ConfigWriter);
    fn validate(&self) -> Result<()>;
}

impl ConfigSection for SceneConfig {
    fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("width", &mut self.width)?;
        kv.take("height", &mut self.height)?;
        kv.take("hfov", &mut self.hfov)?;
        kv.take("max_range", &mut self.max_range)?;
        kv.take("camera_height_min", &mut self.camera_height_min)?;
        kv.take("camera_height_max", &mut self.camera_height_max)?;
        kv.take("max_yaw", &mut self.max_yaw)?;
        kv.take("room_min", &mut self.room_min)?;
        kv.take("room_max", &mut self.room_max)?;
        kv.take("box_count_min", &mut self.box_count_min)?;
        kv.take("box_count_max", &mut self.box_count_max)?;
        kv.take("box_size_min", &mut self.box_size_min)?;
        kv.take("box_size_max", &mut self.box_size_max)?;
        kv.take("raised_box_p", &mut self.raised_box_p)?;
        kv.take("ambient", &mut self.ambient)?;
        kv.take("laser_height", &mut self.laser_height)?;
        kv.take("laser_fov", &mut self.laser_fov)?;
        kv.take("laser_rays", &mut self.laser_rays)?;
        kv.take("laser_noise", &mut self.laser_noise)?;
        kv.take("laser_dropout", &mut self.laser_dropout)?;
        Ok(())
    }

    fn write(&self, w: &mut ConfigWriter) {
        w.section("scene");
        w.put("width", self.width);
        w.put("height", self.height);
        w.put("hfov", self.hfov);
        w.put("max_range", self.max_range);
        w.put("camera_height_min", self.camera_height_min);
        w.put("camera_height_max", self.camera_height_max);
        w.put("max_yaw", self.max_yaw);
        w.put("room_min", self.room_min);
        w.put("room_max", self.room_max);
        w.put("box_count_min", self.box_count_min);
        w.put("box_count_max", self.box_count_max);
        w.put("box_size_min", self.box_size_min);
        w.put("box_size_max", self.box_size_max);
        w.put("raised_box_p", self.raised_box_p);
        w.put("ambient", self.ambient);
        w.put("laser_height", self.laser_height);
        w.put("laser_fov", self.laser_fov);
        w.put("laser_rays", self.laser_rays);
        w.put("laser_noise", self.laser_noise);
        w.put("laser_dropout", self.laser_dropout);
    }

    fn validate(&self) -> Result<()> {
        SceneConfig::validate(self)
    }
}

/// Dataset generation options that are not part of the scene model.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_scenes: 250,
            split_ratio: 0.8,
            seed: 7,
        }
    }
}

impl ConfigSection for DataConfig {
    fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("n_scenes", &mut self.n_scenes)?;
        kv.take("split_ratio", &mut self.split_ratio)?;
        kv.take("data_seed", &mut self.seed)
    }

    fn write(&self, w: &mut ConfigWriter) {
        w.section("data");
        w.put("n_scenes", self.n_scenes);
        w.put("split_ratio", self.split_ratio);
        w.put("data_seed", self.seed);
    }

    fn validate(&self) -> Result<()> {
        if self.n_scenes < 2 {
            return Err(Error::Config("n_scenes must be at least 2".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Every configurable knob of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Applies `kv` on top of the defaults and validates the result.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.scene.apply(&mut kv)?;
        cfg.data.apply(&mut kv)?;
        cfg.network.apply(&mut kv)?;
        cfg.train.apply(&mut kv)?;
        cfg.eval.apply(&mut kv)?;
        kv.finish()?;
        // The network input always matches the rendered image.
        cfg.network.in_width = cfg.scene.width;
        cfg.network.in_height = cfg.scene.height;
        if cfg.network.depth_max > cfg.scene.max_range as f32 {
            cfg.network.depth_max = cfg.scene.max_range as f32;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        ConfigSection::validate(&self.scene)?;
        self.data.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_text(&self) -> String {
        let mut w = ConfigWriter::default();
        self.scene.write(&mut w);
        self.data.write(&mut w);
        self.network.write(&mut w);
        self.train.write(&mut w);
        self.eval.write(&mut w);
        w.finish()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
