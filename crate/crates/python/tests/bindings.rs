use pyo3::prelude::*;
use radsurv_py::radsurv_py;

#[test]
fn module_functions_from_python() {
    pyo3::append_to_inittab!(radsurv_py);
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| {
        let code = c"
import math
import radsurv_py as r
assert abs(r.cox_loss([0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [True, True, True]) - math.log(6) / 3) < 1e-12
assert r.concordance([3.0, 2.0, 1.0], [1.0, 2.0, 3.0], [True, True, True]) == 1.0
assert abs(r.bleu('the lungs are clear .', 'the lungs are clear .') - 1.0) < 1e-12
assert r.rouge('a b', 'c d') == 0.0
b = r.BoundingBox(0.0, 0.0, 0.5, 0.5)
assert abs(b.iou(b) - 1.0) < 1e-6
try:
    r.concordance([1.0], [1.0, 2.0], [True])
    raise AssertionError('expected ValueError')
except ValueError:
    pass
";
        py.run(code, None, None).unwrap();
    });
}
