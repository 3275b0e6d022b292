use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

use super::vocab::{cell_class, class_attributes, shape_template, BACKGROUND_CLASS, N_CELL_CLASSES};

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subject {
    pub shape_id: u8,
    pub color_id: u8,
    /// Top-left corner of the footprint's bounding box.
    pub anchor: Cell,
    /// Occupied cells, sorted row-major.
    pub footprint: Vec<Cell>,
}

impl Subject {
    /// Subject with the canonical footprint of its shape.
    pub fn new(shape_id: u8, color_id: u8, anchor: Cell) -> Self {
        let mut footprint: Vec<Cell> = shape_template(shape_id)
            .iter()
            .map(|&(dr, dc)| (anchor.0 + dr, anchor.1 + dc))
            .collect();
        footprint.sort_unstable();
        Self {
            shape_id,
            color_id,
            anchor,
            footprint,
        }
    }

    pub fn class(&self) -> usize {
        cell_class(self.shape_id, self.color_id)
    }

    /// Bounding-box center as (row, col).
    pub fn center(&self) -> (f64, f64) {
        let n = self.footprint.len() as f64;
        let r = self.footprint.iter().map(|c| c.0 as f64).sum::<f64>() / n;
        let c = self.footprint.iter().map(|c| c.1 as f64).sum::<f64>() / n;
        (r, c)
    }

    fn touches(&self, other: &Subject) -> bool {
        self.footprint.iter().any(|&(r, c)| {
            other.footprint.iter().any(|&(r2, c2)| r.abs_diff(r2) + c.abs_diff(c2) <= 1)
        })
    }
}

/// Predicate over subject attributes; `None` fields match anything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectQuery {
    pub shape_id: Option<u8>,
    pub color_id: Option<u8>,
}

impl SubjectQuery {
    pub fn exact(s: &Subject) -> Self {
        Self {
            shape_id: Some(s.shape_id),
            color_id: Some(s.color_id),
        }
    }

    pub fn matches(&self, s: &Subject) -> bool {
        self.shape_id.is_none_or(|v| v == s.shape_id) && self.color_id.is_none_or(|v| v == s.color_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: (usize, usize),
    /// Sorted by first footprint cell, row-major.
    pub subjects: Vec<Subject>,
    pub background: u8,
}

impl Scene {
    pub fn empty(grid_size: (usize, usize)) -> Self {
        Self {
            grid_size,
            subjects: Vec::new(),
            background: 0,
        }
    }

    /// Validates and canonicalizes subject order.
    pub fn new(grid_size: (usize, usize), mut subjects: Vec<Subject>) -> Result<Self> {
        subjects.sort_by(|a, b| a.footprint.first().cmp(&b.footprint.first()));
        let scene = Self {
            grid_size,
            subjects,
            background: 0,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn n_cells(&self) -> usize {
        self.grid_size.0 * self.grid_size.1
    }

    /// Footprints inside the grid and pairwise disjoint; same-class subjects
    /// may not touch, since they would decode as one component.
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.grid_size;
        if self.background != 0 {
            return Err(Error::Precondition("only background class 0 exists".into()));
        }
        let mut occupied = vec![false; rows * cols];
        for s in &self.subjects {
            if class_attributes(s.class()).is_none() {
                return Err(Error::Precondition(format!("unknown subject class {:?}", s)));
            }
            for &(r, c) in &s.footprint {
                if r >= rows || c >= cols {
                    return Err(Error::Precondition(format!("cell ({r},{c}) outside grid")));
                }
                if std::mem::replace(&mut occupied[r * cols + c], true) {
                    return Err(Error::Precondition(format!("cell ({r},{c}) occupied twice")));
                }
            }
        }
        for (i, a) in self.subjects.iter().enumerate() {
            for b in &self.subjects[i + 1..] {
                if a.class() == b.class() && a.touches(b) {
                    return Err(Error::Precondition(
                        "same-class subjects may not be adjacent".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Class id per cell, row-major.
    pub fn class_map(&self) -> Vec<usize> {
        let cols = self.grid_size.1;
        let mut map = vec![BACKGROUND_CLASS; self.n_cells()];
        for s in &self.subjects {
            for &(r, c) in &s.footprint {
                map[r * cols + c] = s.class();
            }
        }
        map
    }

    /// Index of the subject covering each cell.
    pub fn owner_map(&self) -> Vec<Option<usize>> {
        let cols = self.grid_size.1;
        let mut map = vec![None; self.n_cells()];
        for (i, s) in self.subjects.iter().enumerate() {
            for &(r, c) in &s.footprint {
                map[r * cols + c] = Some(i);
            }
        }
        map
    }
}

/// Fixed orthonormal codebook: one unit vector per cell class.
pub fn codebook_dim() -> usize {
    N_CELL_CLASSES
}

pub fn codevector(class: usize) -> Vec<f32> {
    let mut v = vec![0.0; N_CELL_CLASSES];
    v[class] = 1.0;
    v
}

/// Latent image: row `r*C + c` is the codevector of cell (r, c).
pub fn render(scene: &Scene) -> Tensor<f32> {
    let classes = scene.class_map();
    let mut data = Vec::with_capacity(classes.len() * N_CELL_CLASSES);
    for class in classes {
        data.extend(codevector(class));
    }
    Tensor::new(vec![scene.n_cells(), N_CELL_CLASSES], data).expect("render shape")
}

/// Nearest codevector per cell (Euclidean; ties go to the lower class id).
pub fn nearest_classes<T: crate::numkit::Scalar>(latents: &Tensor<T>) -> Result<Vec<usize>> {
    if latents.cols() != N_CELL_CLASSES || latents.shape().len() != 2 {
        return Err(Error::shape(
            "decode",
            format!("latent width {} vs {}", latents.cols(), N_CELL_CLASSES),
        ));
    }
    let mut out = Vec::with_capacity(latents.rows());
    for i in 0..latents.rows() {
        let row = latents.row(i);
        let mut best = (0, f64::INFINITY);
        for k in 0..N_CELL_CLASSES {
            let d: f64 = row
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let e = if j == k { 1.0 } else { 0.0 };
                    (v.as_f64() - e).powi(2)
                })
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Groups a per-cell class map into subjects by 4-connected same-class
/// components. Footprints need not match a canonical shape.
pub fn scene_from_classes(grid_size: (usize, usize), classes: &[usize]) -> Scene {
    let (rows, cols) = grid_size;
    let mut seen = vec![false; rows * cols];
    let mut subjects = Vec::new();
    for start in 0..rows * cols {
        let class = classes[start];
        if class == BACKGROUND_CLASS || seen[start] {
            continue;
        }
        let (shape_id, color_id) = class_attributes(class).expect("decoded class");
        let mut stack = vec![start];
        seen[start] = true;
        let mut cells = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            cells.push((r, c));
            let mut visit = |rr: usize, cc: usize| {
                let j = rr * cols + cc;
                if !seen[j] && classes[j] == class {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < rows {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < cols {
                visit(r, c + 1);
            }
        }
        cells.sort_unstable();
        let anchor = (
            cells.iter().map(|c| c.0).min().unwrap(),
            cells.iter().map(|c| c.1).min().unwrap(),
        );
        subjects.push(Subject {
            shape_id,
            color_id,
            anchor,
            footprint: cells,
        });
    }
    // components are discovered in row-major order of their first cell
    Scene {
        grid_size,
        subjects,
        background: 0,
    }
}

pub fn decode<T: crate::numkit::Scalar>(latents: &Tensor<T>, grid_size: (usize, usize)) -> Result<Scene> {
    if latents.rows() != grid_size.0 * grid_size.1 {
        return Err(Error::shape(
            "decode",
            format!("{} latent rows for a {grid_size:?} grid", latents.rows()),
        ));
    }
    let classes = nearest_classes(latents)?;
    Ok(scene_from_classes(grid_size, &classes))
}

pub fn judge_presence(scene: &Scene, query: &SubjectQuery) -> bool {
    scene.subjects.iter().any(|s| query.matches(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_square_scene() -> Scene {
        Scene::new((6, 6), vec![Subject::new(3, 0, (1, 1))]).unwrap()
    }

    #[test]
    fn empty_scene_renders_background() {
        let t = render(&Scene::empty((3, 3)));
        for i in 0..9 {
            assert_eq!(t.row(i), codevector(BACKGROUND_CLASS).as_slice());
        }
        assert!(decode(&t, (3, 3)).unwrap().subjects.is_empty());
    }

    #[test]
    fn one_cell_subject_renders_one_codevector() {
        let s = Scene::new((3, 3), vec![Subject::new(0, 2, (1, 2))]).unwrap();
        let t = render(&s);
        let non_bg = (0..9)
            .filter(|&i| t.row(i) != codevector(BACKGROUND_CLASS).as_slice())
            .count();
        assert_eq!(non_bg, 1);
        assert_eq!(decode(&t, (3, 3)).unwrap(), s);
    }

    #[test]
    fn noisy_latents_decode_to_the_same_scene() {
        // orthonormal codewords are sqrt(2) apart; any perturbation with norm
        // below sqrt(2)/2 keeps the nearest codeword
        let scene = red_square_scene();
        let mut t = render(&scene);
        let half = std::f32::consts::SQRT_2 / 2.0;
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let k = (i * 7) % row.len();
            row[k] += 0.99 * half * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        assert_eq!(decode(&t, (6, 6)).unwrap(), scene);
    }

    #[test]
    fn overlapping_and_touching_subjects_are_rejected() {
        let a = Subject::new(3, 0, (0, 0));
        assert!(Scene::new((4, 4), vec![a.clone(), Subject::new(0, 1, (1, 1))]).is_err());
        assert!(Scene::new((4, 4), vec![a.clone(), Subject::new(3, 0, (0, 2))]).is_err());
        assert!(Scene::new((4, 4), vec![a, Subject::new(3, 1, (0, 2))]).is_ok());
        assert!(Scene::new((2, 2), vec![Subject::new(1, 0, (0, 1))]).is_err());
    }

    #[test]
    fn judge_cases() {
        let s = red_square_scene();
        assert!(judge_presence(&s, &SubjectQuery::exact(&s.subjects[0])));
        let blue_dot = SubjectQuery {
            shape_id: Some(0),
            color_id: Some(2),
        };
        assert!(!judge_presence(&s, &blue_dot));
    }
}
