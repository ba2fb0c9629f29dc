use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{BBox, Grid};
use super::vocab::{CategoryId, CategoryVocabulary, Kind};
use super::WorldError;

pub type InstanceId = u16;

/// Panoptic-instance value for cells not covered by any instance.
pub const NO_INSTANCE: InstanceId = u16::MAX;

const PLACEMENT_RETRIES: usize = 200;
const INSTANCE_JITTER: f32 = 0.04;
const CELL_NOISE: f32 = 0.03;

/// How many instances of a chosen category are placed together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSizeLaw {
    Fixed(usize),
    Uniform { min: usize, max: usize },
    /// `weights[i]` is the weight of a group of `i + 1` instances.
    Weights(Vec<f64>),
}

impl GroupSizeLaw {
    fn sample<R: Rng>(&self, rng: &mut R) -> Result<usize, WorldError> {
        Ok(match self {
            GroupSizeLaw::Fixed(n) => *n,
            GroupSizeLaw::Uniform { min, max } => rng.gen_range(*min..=*max),
            GroupSizeLaw::Weights(w) => {
                let d = WeightedIndex::new(w).map_err(|e| WorldError::Config(format!("group size weights: {e}")))?;
                d.sample(rng) + 1
            }
        })
    }

    fn validate(&self) -> Result<(), WorldError> {
        let ok = match self {
            GroupSizeLaw::Fixed(n) => *n >= 1,
            GroupSizeLaw::Uniform { min, max } => *min >= 1 && min <= max,
            GroupSizeLaw::Weights(w) => !w.is_empty() && w.iter().all(|x| *x >= 0.0) && w.iter().any(|x| *x > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(WorldError::Config(format!("invalid group size law {self:?}")))
        }
    }
}

/// Co-occurrence regularities of one kind of scene. Category weights are
/// keyed by canonical name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTemplate {
    pub name: String,
    pub category_weights: BTreeMap<String, f64>,
    pub group_size_law: GroupSizeLaw,
    pub background_category: String,
    pub object_count_range: (usize, usize),
    /// Inclusive side-length range for instance boxes.
    #[serde(default = "default_object_size")]
    pub object_size: (usize, usize),
}

fn default_object_size() -> (usize, usize) {
    (2, 6)
}

impl SceneTemplate {
    pub fn validate(&self, vocab: &CategoryVocabulary) -> Result<(), WorldError> {
        let cfg = |m: String| Err(WorldError::Config(format!("template `{}`: {m}", self.name)));
        if self.category_weights.values().any(|w| *w < 0.0 || !w.is_finite()) {
            return cfg("negative or non-finite category weight".into());
        }
        if !self.category_weights.values().any(|w| *w > 0.0) {
            return cfg("no positive category weight".into());
        }
        for name in self.category_weights.keys() {
            match vocab.by_name(name) {
                None => return cfg(format!("unknown category `{name}`")),
                Some(c) if c.kind != Kind::Thing => return cfg(format!("`{name}` is not a thing category")),
                _ => {}
            }
        }
        match vocab.by_name(&self.background_category) {
            Some(c) if c.kind == Kind::Stuff => {}
            _ => return cfg(format!("background `{}` is not a stuff category", self.background_category)),
        }
        let (lo, hi) = self.object_count_range;
        if lo < 1 || lo > hi {
            return cfg(format!("object count range {lo}..={hi}"));
        }
        let (smin, smax) = self.object_size;
        if smin < 1 || smin > smax {
            return cfg(format!("object size range {smin}..={smax}"));
        }
        self.group_size_law.validate()
    }

    /// The four built-in templates.
    pub fn builtin() -> Vec<SceneTemplate> {
        let law = GroupSizeLaw::Weights(vec![0.35, 0.35, 0.2, 0.1]);
        let mk = |name: &str, bg: &str, w: &[(&str, f64)]| SceneTemplate {
            name: name.into(),
            category_weights: w.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            group_size_law: law.clone(),
            background_category: bg.into(),
            object_count_range: (2, 6),
            object_size: default_object_size(),
        };
        vec![
            mk(
                "farm",
                "grass",
                &[("cow", 3.0), ("sheep", 3.0), ("horse", 2.0), ("dog", 1.0), ("person", 2.0), ("child", 1.0)],
            ),
            mk(
                "street",
                "road",
                &[("car", 3.0), ("bus", 2.0), ("dog", 1.0), ("person", 3.0), ("child", 1.0)],
            ),
            mk("harbor", "water", &[("boat", 4.0), ("bird", 2.0), ("person", 2.0)]),
            mk(
                "office",
                "floor",
                &[("laptop", 3.0), ("chair", 3.0), ("person", 3.0), ("child", 1.0)],
            ),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: InstanceId,
    pub category: CategoryId,
    pub bbox: BBox,
    pub color_attr: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// `height × width × C`, values in [0, 1].
    pub appearance: Grid<f32>,
    pub panoptic_category: Grid<u16>,
    /// [`NO_INSTANCE`] where only background is visible.
    pub panoptic_instance: Grid<u16>,
    pub instances: Vec<Instance>,
    pub template_name: String,
}

impl Scene {
    pub fn instance(&self, id: InstanceId) -> Option<&Instance> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    /// Fraction of an instance's box where it is the topmost instance.
    pub fn visibility(&self, id: InstanceId) -> f64 {
        let Some(inst) = self.instance(id) else { return 0.0 };
        let visible = inst
            .bbox
            .cells()
            .filter(|&(x, y)| self.panoptic_instance.at(x, y) == id)
            .count();
        visible as f64 / inst.bbox.area() as f64
    }

    /// Number of cells labeled with each category id.
    pub fn category_histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for &c in &self.panoptic_category.data {
            if (c as usize) < k {
                h[c as usize] += 1;
            }
        }
        h
    }
}

/// Places instances one at a time (later ones drawn on top) and renders
/// appearance: background color plus per-cell noise; each instance paints
/// its box in horizontal stripes alternating the category color (even rows
/// from the box top) and its color attribute (odd rows), plus a
/// per-instance jitter and per-cell noise.
pub fn generate_scene(
    template: &SceneTemplate,
    vocab: &CategoryVocabulary,
    dims: (usize, usize),
    seed: u64,
) -> Result<Scene, WorldError> {
    let (width, height) = dims;
    if width < 4 || height < 4 {
        return Err(WorldError::Config(format!("scene dims {width}×{height} below 4×4")));
    }
    template.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let names: Vec<&String> = template.category_weights.keys().collect();
    let weights: Vec<f64> = names.iter().map(|n| template.category_weights[*n]).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| WorldError::Config(e.to_string()))?;
    let background = vocab.id_of(&template.background_category)?;

    let (lo, hi) = template.object_count_range;
    let target_count = rng.gen_range(lo..=hi);
    let mut planned: Vec<CategoryId> = Vec::with_capacity(target_count);
    while planned.len() < target_count {
        let cat = vocab.id_of(names[pick.sample(&mut rng)])?;
        let g = template.group_size_law.sample(&mut rng)?;
        let g = g.min(target_count - planned.len());
        planned.extend(std::iter::repeat(cat).take(g));
    }

    let mut panoptic_instance = Grid::<u16>::filled(width, height, 1, NO_INSTANCE);
    let mut instances: Vec<Instance> = Vec::with_capacity(planned.len());
    let (smin, smax) = template.object_size;
    for (idx, &cat) in planned.iter().enumerate() {
        let id = idx as InstanceId;
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.gen_range(smin..=smax).min(width);
            let h = rng.gen_range(smin..=smax).min(height);
            let x1 = rng.gen_range(0..=width - w);
            let y1 = rng.gen_range(0..=height - h);
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h);
            if instances
                .iter()
                .any(|o| o.bbox.contains_box(&bbox) || bbox.contains_box(&o.bbox))
            {
                continue;
            }
            // every earlier instance keeps at least one visible cell
            let starves = instances.iter().any(|o| {
                o.bbox
                    .cells()
                    .filter(|&(x, y)| panoptic_instance.at(x, y) == o.instance_id)
                    .all(|(x, y)| bbox.contains(x, y))
            });
            if starves {
                continue;
            }
            placed = Some(bbox);
            break;
        }
        let bbox = placed.ok_or_else(|| WorldError::Generation {
            template: template.name.clone(),
            msg: format!("could not place instance {idx} after {PLACEMENT_RETRIES} attempts"),
        })?;
        for (x, y) in bbox.cells() {
            panoptic_instance.set(x, y, id);
        }
        let color_attr = vocab.colors[rng.gen_range(0..vocab.colors.len())].name.clone();
        instances.push(Instance {
            instance_id: id,
            category: cat,
            bbox,
            color_attr,
        });
    }

    let channels = vocab.channels();
    let mut appearance = Grid::<f32>::new(width, height, channels);
    let mut panoptic_category = Grid::<u16>::filled(width, height, 1, background);
    let bg_color = &vocab.categories[background as usize].color;
    for y in 0..height {
        for x in 0..width {
            let cell = appearance.cell_mut(x, y);
            for (c, v) in cell.iter_mut().enumerate() {
                *v = bg_color[c] + rng.gen_range(-CELL_NOISE..CELL_NOISE);
            }
        }
    }
    for inst in &instances {
        let base = &vocab.categories[inst.category as usize].color;
        let attr = &vocab.color(&inst.color_attr).expect("palette color").value;
        let jitter: Vec<f32> = (0..channels)
            .map(|_| rng.gen_range(-INSTANCE_JITTER..INSTANCE_JITTER))
            .collect();
        for (x, y) in inst.bbox.cells() {
            if panoptic_instance.at(x, y) != inst.instance_id {
                continue;
            }
            panoptic_category.set(x, y, inst.category);
            let src = if (y - inst.bbox.y1) % 2 == 0 { base } else { attr };
            let cell = appearance.cell_mut(x, y);
            for c in 0..channels {
                cell[c] = src[c] + jitter[c] + rng.gen_range(-CELL_NOISE..CELL_NOISE);
            }
        }
    }
    appearance.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(Scene {
        width,
        height,
        appearance,
        panoptic_category,
        panoptic_instance,
        instances,
        template_name: template.name.clone(),
    })
}
