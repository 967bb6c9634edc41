import numpy as np
import numpy.testing as npt
import pytest

import memaug.autodiff as ad
from memaug import AdamState, ParamStore, Tensor, adam_step, backward
from memaug.errors import ConfigError, OptimizerError

from oracles import ref_adam_trajectory


def make_store():
    store = ParamStore()
    store.add("w", Tensor(np.ones((2, 2))))
    store.add("frozen.w", Tensor(np.full((2, 2), 5.0)), frozen=True)
    return store


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = make_store()
        with pytest.raises(ConfigError):
            store.add("w", Tensor(np.zeros(1)))

    def test_frozen_entries_have_no_grad_flag(self):
        store = make_store()
        assert not store["frozen.w"].requires_grad
        assert store["w"].requires_grad

    def test_snapshot_restore(self):
        store = make_store()
        snap = store.snapshot()
        store["w"].data += 1.0
        store.restore(snap)
        npt.assert_array_equal(store["w"].data, np.ones((2, 2)))

    def test_fingerprint_changes_with_values(self):
        store = make_store()
        before = store.fingerprint()
        store["w"].data[0, 0] += 1e-12
        assert store.fingerprint() != before


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        store = make_store()
        store.zero_grads()
        state = AdamState(lr=0.1)
        adam_step(store, state)
        npt.assert_array_equal(store["w"].data, np.ones((2, 2)))

    def test_first_step_closed_form(self):
        # g=1, lr=0.1: bias-corrected mhat=vhat=1, so theta drops by ~0.1
        store = ParamStore()
        store.add("theta", Tensor(np.array([[1.0]])))
        store["theta"].grad = np.array([[1.0]])
        adam_step(store, AdamState(lr=0.1))
        assert store["theta"].data[0, 0] == pytest.approx(0.9, abs=1e-8)

    def test_three_step_trajectory_matches_recurrence_oracle(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        grads = [0.3, -1.2, 0.7]
        store = ParamStore()
        store.add("theta", Tensor(np.array([[2.0]])))
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        seen = []
        for g in grads:
            store["theta"].grad = np.array([[g]])
            adam_step(store, state)
            seen.append(float(store["theta"].data[0, 0]))
        expected = ref_adam_trajectory(2.0, grads, lr, b1, b2, eps)
        npt.assert_allclose(seen, expected, atol=1e-12)

    def test_frozen_parameter_is_byte_identical(self):
        store = make_store()
        frozen_before = store["frozen.w"].data.tobytes()
        state = AdamState(lr=0.5)
        for _ in range(5):
            loss = ad.sum_all(ad.mul(store["w"], store["w"]))
            store.zero_grads()
            backward(loss)
            adam_step(store, state)
        assert store["frozen.w"].data.tobytes() == frozen_before
        assert store["frozen.w"].grad is None

    def test_missing_grad_raises(self):
        store = make_store()
        with pytest.raises(OptimizerError, match="'w'"):
            adam_step(store, AdamState())

    def test_grads_cleared_after_step(self):
        store = make_store()
        store.zero_grads()
        adam_step(store, AdamState())
        assert store["w"].grad is None

    def test_moments_exist_only_for_stepped_params(self):
        store = make_store()
        store.zero_grads()
        state = AdamState()
        adam_step(store, state)
        assert set(state.m) == {"w"}
