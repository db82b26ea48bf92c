use serde::Serialize;

use super::spec::NetworkSpec;

/// Receptive field, effective stride and first-unit center of a feature map.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct Geometry {
    pub rf: (usize, usize),
    pub jump: usize,
    pub offset: (f64, f64),
}

impl Geometry {
    pub const INPUT: Geometry = Geometry {
        rf: (1, 1),
        jump: 1,
        offset: (0.0, 0.0),
    };

    /// Geometry after applying a `kernel` window with `stride` and `pad`.
    pub fn step(&self, kernel: (usize, usize), stride: usize, pad: usize) -> Geometry {
        let j = self.jump as f64;
        let shift = |k: usize| ((k as f64 - 1.0) / 2.0 - pad as f64) * j;
        Geometry {
            rf: (
                self.rf.0 + (kernel.0 - 1) * self.jump,
                self.rf.1 + (kernel.1 - 1) * self.jump,
            ),
            jump: self.jump * stride,
            offset: (
                self.offset.0 + shift(kernel.0),
                self.offset.1 + shift(kernel.1),
            ),
        }
    }
}

/// Per-layer geometry in trunk order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryTable {
    pub entries: Vec<(String, Geometry)>,
}

impl GeometryTable {
    pub fn get(&self, name: &str) -> Option<&Geometry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn last(&self) -> Option<&(String, Geometry)> {
        self.entries.last()
    }
}

/// Folds the receptive-field recurrence over the trunk. BN and ReLU layers
/// carry their input geometry unchanged.
pub fn analyze_geometry(spec: &NetworkSpec) -> GeometryTable {
    let mut g = Geometry::INPUT;
    let mut entries = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        if !l.kind.is_elementwise() {
            g = g.step(l.kernel, l.stride, l.pad);
        }
        entries.push((l.name.clone(), g));
    }
    GeometryTable { entries }
}

/// One row of the geometry report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryRow {
    pub name: String,
    pub geometry: Geometry,
}

/// Feature-map rows of the report. Elementwise layers are dropped, and
/// consecutive maps with identical geometry collapse into one row whose name
/// joins theirs with `&` (VGG-16's fc6 and fc7 become `fc6&fc7`).
pub fn geometry_rows(spec: &NetworkSpec) -> Vec<GeometryRow> {
    let table = analyze_geometry(spec);
    let mut rows: Vec<GeometryRow> = Vec::new();
    for (l, (name, g)) in spec.layers.iter().zip(&table.entries) {
        if l.kind.is_elementwise() {
            continue;
        }
        match rows.last_mut() {
            Some(prev) if prev.geometry == *g => {
                prev.name.push('&');
                prev.name.push_str(name);
            }
            _ => rows.push(GeometryRow {
                name: name.clone(),
                geometry: *g,
            }),
        }
    }
    rows
}

/// CSV rendering of [`geometry_rows`].
pub fn geometry_csv(spec: &NetworkSpec) -> String {
    let mut out = String::from("layer,rf_h,rf_w,jump\n");
    for r in geometry_rows(spec) {
        let g = r.geometry;
        out.push_str(&format!("{},{},{},{}\n", r.name, g.rf.0, g.rf.1, g.jump));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::{vgg16_spec, LayerSpec};

    #[test]
    fn single_conv_rf_is_kernel() {
        for k in [1, 3, 7] {
            let spec = NetworkSpec::trunk("one", 1, vec![LayerSpec::conv("c", k, 1, 0, 1, 1)]);
            let g = analyze_geometry(&spec);
            assert_eq!(g.get("c").unwrap().rf, (k, k));
        }
    }

    #[test]
    fn vgg_table_has_nineteen_rows() {
        let rows = geometry_rows(&vgg16_spec());
        assert_eq!(rows.len(), 19);
        assert_eq!(rows[18].name, "fc6&fc7");
        assert_eq!(rows[18].geometry.rf, (404, 404));
        assert_eq!(rows[17].geometry.jump, 32);
    }

    #[test]
    fn offsets_stay_centered_for_same_padding() {
        let g = analyze_geometry(&vgg16_spec());
        assert_eq!(g.get("conv1_2").unwrap().offset, (0.0, 0.0));
        assert_eq!(g.get("pool1").unwrap().offset, (0.5, 0.5));
        assert_eq!(g.get("pool2").unwrap().offset, (1.5, 1.5));
    }
}
