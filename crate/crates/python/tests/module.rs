use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_exposes_core_operations() {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(moadnet::moadnet)(py);
        let locals = PyDict::new(py);
        locals.set_item("m", m).unwrap();
        let code = c"
w = m.append_constant([2.0, 3.0], 1.0)
o = m.append_constant([4.0], 0.0)
sub = m.outer_op(w, o, 'subtraction')
assert sub == [[1.0, -3.0], [2.0, -2.0], [3.0, -1.0]], sub
assert m.moab_shapes(8, 4, 2)['interaction'] == [4, 9, 5]
assert m.concordance_index([1.0, 2.0], [1.0, 2.0], [False, False]) == 0.0
try:
    m.outer_op(w, o, 'modulo')
    raise AssertionError('accepted unknown op')
except ValueError:
    pass
";
        py.run(code, None, Some(&locals)).unwrap();
    });
}
