import numpy as np
import pytest

from _blockevo.pso import (
    EvalStatus,
    Evaluation,
    FitnessEvaluationError,
    Particle,
    PsoConfig,
    init_swarm,
    read_history_csv,
    run_pso,
    step_generation,
    update_particle,
    write_history_csv,
)
from _blockevo.utils import InvariantViolation


class ScriptedRng:
    """Returns the given uniform draws in order."""

    def __init__(self, *draws):
        self.draws = [np.asarray(d, dtype=np.float64) for d in draws]

    def random(self, size):
        draw = self.draws.pop(0)
        assert draw.shape == (size,)
        return draw


class CountingRng:
    """A seeded generator that counts the uniform values it hands out."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.drawn = 0

    def random(self, size):
        self.drawn += size
        return self.rng.random(size)


def sphere(position):
    return -float(np.sum(position**2))


class TestInit:
    def test_shape(self):
        swarm = init_swarm(PsoConfig(), 16)
        assert len(swarm.particles) == 30
        assert all(p.position.shape == (16,) for p in swarm.particles)
        assert swarm.global_best_position is None

    def test_deterministic(self):
        a = init_swarm(PsoConfig(seed=3), 16)
        b = init_swarm(PsoConfig(seed=3), 16)
        for p, q in zip(a.particles, b.particles):
            np.testing.assert_array_equal(p.position, q.position)
            np.testing.assert_array_equal(p.velocity, q.velocity)

    def test_within_bounds(self):
        swarm = init_swarm(PsoConfig(population_size=625), 16)
        positions = np.stack([p.position for p in swarm.particles])
        assert positions.size == 10_000
        assert positions.min() >= 1.0 and positions.max() <= 32.0

    def test_invalid_population(self):
        with pytest.raises(InvariantViolation):
            PsoConfig(population_size=0)


class TestUpdate:
    def _particle(self, x, v, pbest):
        return Particle(
            position=np.array([x], dtype=np.float64),
            velocity=np.array([v], dtype=np.float64),
            best_position=np.array([pbest], dtype=np.float64),
        )

    def test_hand_computed_step(self):
        config = PsoConfig(position_bounds=(-100.0, 100.0))
        p = self._particle(10.0, 2.0, 12.0)
        moved = update_particle(p, np.array([8.0]), config, ScriptedRng([0.5], [0.25]))
        # 0.7298*2 + 1.49618*0.5*(12-10) + 1.49618*0.25*(8-10)
        expected_v = 1.4596 + 1.49618 - 0.74809
        np.testing.assert_allclose(moved.velocity, [expected_v], rtol=1e-12)
        np.testing.assert_allclose(moved.position, [10.0 + expected_v], rtol=1e-12)

    def test_velocity_decays_geometrically(self):
        config = PsoConfig(w=0.7298, c1=0.0, c2=0.0, position_bounds=(-1000.0, 1000.0))
        v0 = np.array([2.0, -1.5, 0.25])
        p = Particle(position=np.zeros(3), velocity=v0.copy(), best_position=np.zeros(3))
        rng = np.random.default_rng(0)
        for t in range(1, 21):
            p = update_particle(p, np.zeros(3), config, rng)
            np.testing.assert_allclose(p.velocity, 0.7298**t * v0, rtol=1e-12)

    @pytest.mark.parametrize("dim", [1, 4, 16])
    def test_two_draws_per_dimension(self, dim):
        config = PsoConfig()
        rng = CountingRng()
        p = Particle(position=np.full(dim, 5.0), velocity=np.zeros(dim), best_position=np.full(dim, 9.0))
        for step in range(1, 4):
            p = update_particle(p, np.full(dim, 3.0), config, rng)
            assert rng.drawn == 2 * dim * step

    def test_pure_inertia(self):
        config = PsoConfig(w=1.0, c1=0.0, c2=0.0, position_bounds=(-100.0, 100.0))
        p = self._particle(3.0, 1.5, 9.0)
        moved = update_particle(p, np.array([-4.0]), config, ScriptedRng([0.3], [0.9]))
        np.testing.assert_array_equal(moved.velocity, [1.5])
        np.testing.assert_array_equal(moved.position, [4.5])

    def test_fixed_point(self):
        config = PsoConfig()
        p = self._particle(5.0, 0.0, 5.0)
        moved = update_particle(p, np.array([5.0]), config, ScriptedRng([0.7], [0.2]))
        np.testing.assert_array_equal(moved.velocity, [0.0])
        np.testing.assert_array_equal(moved.position, [5.0])

    def test_velocity_clamp(self):
        config = PsoConfig()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = Particle(
                position=rng.uniform(1, 32, 100),
                velocity=rng.uniform(-50, 50, 100),
                best_position=rng.uniform(1, 32, 100),
            )
            moved = update_particle(p, rng.uniform(1, 32, 100), config, rng)
            assert np.all(np.abs(moved.velocity) <= 12.5)
            assert np.all((moved.position >= 1.0) & (moved.position <= 32.0))

    def test_length_mismatch(self):
        p = self._particle(1.0, 0.0, 1.0)
        with pytest.raises(InvariantViolation):
            update_particle(p, np.zeros(2), PsoConfig(), np.random.default_rng(0))


class TestGenerations:
    def test_constant_fitness_keeps_first_best(self):
        config = PsoConfig(population_size=5)
        rng = np.random.default_rng(config.seed)
        swarm = init_swarm(config, 4, rng)
        swarm, _ = step_generation(swarm, config, lambda x: 0.0, rng)
        first = swarm.particles[0].position.copy()
        np.testing.assert_array_equal(swarm.global_best_position, first)
        for _ in range(3):
            swarm, _ = step_generation(swarm, config, lambda x: 0.0, rng)
            np.testing.assert_array_equal(swarm.global_best_position, first)

    def test_does_not_mutate_input(self):
        config = PsoConfig(population_size=3)
        rng = np.random.default_rng(0)
        swarm = init_swarm(config, 4, rng)
        before = [p.position.copy() for p in swarm.particles]
        step_generation(swarm, config, sphere, rng)
        for p, position in zip(swarm.particles, before):
            np.testing.assert_array_equal(p.position, position)
        assert swarm.generation == 0

    def test_best_is_monotone(self):
        for seed in range(50):
            weights = np.random.default_rng(seed).normal(size=6)
            config = PsoConfig(population_size=6, generations=8, seed=seed)
            result = run_pso(config, 6, lambda x: float(np.sin(x @ weights)))
            bests = [r.global_best_fitness for r in result.history]
            assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))

    def test_singleton_swarm(self):
        config = PsoConfig(population_size=1, generations=1)
        result = run_pso(config, 3, sphere)
        assert result.global_best_fitness == sphere(result.global_best_position)

    def test_sphere_converges(self):
        config = PsoConfig(position_bounds=(-10.0, 10.0), population_size=30, generations=200, seed=0)
        result = run_pso(config, 10, sphere)
        assert result.global_best_fitness > -1e-3

    def test_same_seed_same_history(self):
        config = PsoConfig(population_size=8, generations=10, seed=11)
        a = run_pso(config, 5, sphere)
        b = run_pso(config, 5, sphere)
        assert a.history == b.history
        np.testing.assert_array_equal(a.global_best_position, b.global_best_position)


class TestOutcomes:
    def test_gated_outcomes_never_become_best(self):
        config = PsoConfig(population_size=4, generations=3)
        result = run_pso(config, 3, lambda x: Evaluation(1.0, EvalStatus.GATED))
        assert result.global_best_position is None
        assert all(r.evaluations_gated == 4 and r.evaluations_performed == 0 for r in result.history)

    def test_batch_fitness_sees_generation(self):
        seen = []

        def batch(generation, positions):
            seen.append((generation, len(positions)))
            return [sphere(x) for x in positions]

        run_pso(PsoConfig(population_size=4, generations=3), 2, batch_fitness=batch)
        assert seen == [(1, 4), (2, 4), (3, 4)]

    def test_hook_reports_improvements(self):
        improved = []
        run_pso(
            PsoConfig(population_size=4, generations=2),
            2,
            sphere,
            on_generation=lambda swarm, record: improved.append(sum(p.improved for p in swarm.particles)),
        )
        # every particle improves on -inf in the first generation
        assert improved[0] == 4

    def test_failure_carries_generation(self):
        calls = []

        def flaky(x):
            calls.append(x)
            if len(calls) > 4:
                raise ValueError("trainer crashed")
            return 0.0

        with pytest.raises(FitnessEvaluationError) as e:
            run_pso(PsoConfig(population_size=4, generations=3), 2, flaky)
        assert e.value.generation == 2
        assert isinstance(e.value.__cause__, ValueError)


def test_history_csv(tmp_path):
    result = run_pso(PsoConfig(population_size=4, generations=3), 2, sphere)
    path = tmp_path / "evolution_history.csv"
    write_history_csv(result.history, path)
    assert path.read_text().splitlines()[0] == "generation,global_best_fitness,evaluations_performed,evaluations_gated"
    assert read_history_csv(path) == result.history
