import pytest
import os
import sys
import numpy as np
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from geometry import (GeometryError, build_coarse_grid, build_fine_mesh, build_fracture_mesh,
                      build_fractured_mesh, compute_coupling, oversample)


class TestFineMesh:

    def test_four_by_four(self):
        """Test counts and face geometry of a 4x4 unit mesh"""
        mesh = build_fine_mesh(4, 4)

        assert mesh.n_cells == 16
        assert mesh.n_faces == 24
        assert np.allclose(mesh.face_lengths, 0.25)
        assert np.allclose(mesh.face_distances, 0.25)
        assert np.all(mesh.face_cells[:, 0] != mesh.face_cells[:, 1])

    def test_single_cell(self):
        """Test the one-cell mesh has no interior faces"""
        mesh = build_fine_mesh(1, 1)
        assert mesh.n_cells == 1
        assert mesh.n_faces == 0

    def test_reference_size(self):
        """Test the 200x200 mesh"""
        mesh = build_fine_mesh(200, 200)
        assert mesh.n_cells == 40000
        assert mesh.n_faces == 199 * 200 + 200 * 199

    def test_area_partition(self):
        """Test cell areas sum to the domain area"""
        mesh = build_fine_mesh(7, 5, (2.0, 3.0))
        assert abs(mesh.areas.sum() - 6.0) <= 1e-12 * 6.0

    @pytest.mark.parametrize('nx,ny', [(0, 4), (4, -1)])
    def test_invalid_dimensions(self, nx, ny):
        """Test zero or negative cell counts are rejected"""
        with pytest.raises(GeometryError):
            build_fine_mesh(nx, ny)

    def test_invalid_extents(self):
        """Test non-positive extents are rejected"""
        with pytest.raises(GeometryError):
            build_fine_mesh(4, 4, (1.0, 0.0))


class TestFractureMesh:

    def setup_method(self):
        self.mesh = build_fine_mesh(4, 4)

    def test_horizontal_segment_subdivision(self):
        """Test a segment spanning the mesh splits at every vertical grid line"""
        y = 0.5 + 1e-3
        fractures = build_fracture_mesh([[(0.0, y), (1.0, y)]], self.mesh)

        assert fractures.n_cells == 4
        assert len(fractures.adjacency) == 3
        assert np.allclose(fractures.lengths, 0.25)
        assert abs(fractures.total_length - 1.0) <= 1e-12
        assert fractures.n_networks == 1

    def test_segment_inside_one_cell(self):
        """Test a segment without boundary crossings"""
        fractures = build_fracture_mesh([[(0.1, 0.1), (0.2, 0.2)]], self.mesh)
        assert fractures.n_cells == 1
        assert len(fractures.adjacency) == 0

    def test_shared_endpoint_joins_networks(self):
        """Test two segments sharing an endpoint form one network"""
        fractures = build_fracture_mesh([[(0.1, 0.1), (0.3, 0.1)], [(0.3, 0.1), (0.3, 0.2)]], self.mesh)
        assert fractures.n_cells == 3
        assert fractures.n_networks == 1

    def test_disjoint_segments_are_separate_networks(self):
        """Test network labels of unconnected segments"""
        fractures = build_fracture_mesh([[(0.1, 0.1), (0.2, 0.1)], [(0.6, 0.6), (0.7, 0.6)]], self.mesh)
        assert fractures.n_networks == 2

    def test_subdivision_conserves_length(self):
        """Test the pieces of an oblique polyline add up to its length"""
        polyline = np.array([(0.05, 0.07), (0.93, 0.61), (0.4, 0.95)])
        fractures = build_fracture_mesh([polyline], build_fine_mesh(13, 11))
        expected = np.hypot(*np.diff(polyline, axis=0).T).sum()
        assert abs(fractures.total_length - expected) <= 1e-12 * expected

    def test_every_piece_in_one_cell(self):
        """Test coupling accepts the conforming subdivision"""
        fine = build_fine_mesh(9, 9)
        fractures = build_fracture_mesh([[(0.03, 0.11), (0.97, 0.83)]], fine)
        coupling = compute_coupling(fine, fractures)
        assert coupling.n_pairs == fractures.n_cells
        assert np.array_equal(coupling.lengths, fractures.lengths)

    def test_adjacency_distances_positive(self):
        """Test midpoint distances of adjacent pieces"""
        fractures = build_fracture_mesh([[(0.05, 0.3), (0.95, 0.6)]], self.mesh)
        assert np.all(fractures.adjacency_distances > 0)
        assert fractures.neighbors(1) == [0, 2]

    def test_outside_domain_rejected(self):
        """Test a polyline leaving the unit square"""
        with pytest.raises(GeometryError, match='leaves the domain'):
            build_fracture_mesh([[(0.5, 0.5), (1.5, 0.5)]], self.mesh)

    def test_zero_length_rejected(self):
        """Test a degenerate segment"""
        with pytest.raises(GeometryError, match='zero-length'):
            build_fracture_mesh([[(0.3, 0.3), (0.3, 0.3)]], self.mesh)

    def test_empty_input(self):
        """Test a mesh without fractures"""
        fractures = build_fracture_mesh([], self.mesh)
        assert fractures.n_cells == 0
        assert fractures.n_networks == 0


class TestCoupling:

    def setup_method(self):
        self.fine = build_fine_mesh(4, 4)

    def test_through_centroid_is_clamped(self):
        """Test theta = h/4 for a fracture through the cell centroid"""
        fractures = build_fracture_mesh([[(0.0, 0.125), (0.25, 0.125)]], self.fine)
        coupling = compute_coupling(self.fine, fractures)

        assert coupling.distances[0] == pytest.approx(0.0625)
        assert coupling.connectivity[0] == pytest.approx(4.0)

    def test_off_centroid_distance(self):
        """Test theta equals the midpoint distance when above the clamp"""
        h = 0.25
        y = 0.125 + h / 3
        fractures = build_fracture_mesh([[(0.05, y), (0.2, y)]], self.fine)
        coupling = compute_coupling(self.fine, fractures)
        assert coupling.distances[0] == pytest.approx(h / 3)


class TestCoarseGrid:

    def test_members_per_coarse_cell(self):
        """Test a 20x20 coarse grid over 200x200 fine cells"""
        fine = build_fine_mesh(200, 200)
        cg = build_coarse_grid(fine, build_fracture_mesh([], fine), 20, 20)

        assert cg.n_cells == 400
        assert all(len(m) == 100 for m in cg.members)
        assert cg.n_dofs == 400
        assert abs(cg.areas.sum() - 1.0) <= 1e-12

    def test_cell_without_fractures(self):
        """Test L_j = 0 for unfractured cells"""
        mesh = build_fractured_mesh(4, 4, (1.0, 1.0), [[(0.1, 0.1), (0.2, 0.2)]])
        cg = build_coarse_grid(mesh.fine, mesh.fractures, 2, 2)
        assert cg.num_networks.tolist() == [1, 0, 0, 0]
        assert cg.n_dofs == 5

    def test_reentrant_fracture_gives_two_local_networks(self):
        """Test a polyline leaving and re-entering a coarse cell"""
        mesh = build_fractured_mesh(4, 4, (1.0, 1.0), [[(0.1, 0.1), (0.4, 0.6), (0.45, 0.1)]])
        cg = build_coarse_grid(mesh.fine, mesh.fractures, 2, 2)

        assert mesh.fractures.n_networks == 1
        assert cg.num_networks[0] == 2
        assert cg.num_networks[2] == 1
        assert cg.n_dofs == 4 + 3

    def test_dof_enumeration(self):
        """Test matrix DOFs first, then networks ordered by cell"""
        mesh = build_fractured_mesh(4, 4, (1.0, 1.0), [[(0.1, 0.1), (0.4, 0.6), (0.45, 0.1)]])
        cg = build_coarse_grid(mesh.fine, mesh.fractures, 2, 2)

        assert cg.dof(3, 0) == 3
        assert [cg.dof(0, 1), cg.dof(0, 2), cg.dof(2, 1)] == [4, 5, 6]
        for dof in range(cg.n_dofs):
            assert cg.dof(*cg.dof_owner(dof)) == dof
        with pytest.raises(GeometryError):
            cg.dof(1, 1)

    def test_partition_of_fracture_length(self):
        """Test local network lengths add up to the total fracture length"""
        polylines = [[(0.05, 0.05), (0.95, 0.9)], [(0.1, 0.8), (0.7, 0.2)], [(0.7, 0.2), (0.9, 0.3)]]
        mesh = build_fractured_mesh(20, 20, (1.0, 1.0), polylines)
        cg = build_coarse_grid(mesh.fine, mesh.fractures, 4, 4)
        total = sum(lengths.sum() for lengths in cg.network_lengths)
        assert abs(total - mesh.fractures.total_length) <= 1e-12 * total

    def test_averaging_rows_sum_to_one(self):
        """Test every averaging row is a set of convex weights"""
        mesh = build_fractured_mesh(8, 8, (1.0, 1.0), [[(0.05, 0.3), (0.95, 0.7)]])
        cg = build_coarse_grid(mesh.fine, mesh.fractures, 4, 4)
        assert np.allclose(np.asarray(cg.averaging.sum(axis=1)).ravel(), 1.0)

    def test_deterministic(self):
        """Test identical inputs give identical enumerations"""
        polylines = [[(0.05, 0.05), (0.95, 0.9)], [(0.1, 0.8), (0.7, 0.2)]]
        first = build_fractured_mesh(10, 10, (1.0, 1.0), polylines)
        second = build_fractured_mesh(10, 10, (1.0, 1.0), polylines)
        cg1 = build_coarse_grid(first.fine, first.fractures, 5, 5)
        cg2 = build_coarse_grid(second.fine, second.fractures, 5, 5)
        assert np.array_equal(cg1.fracture_dof, cg2.fracture_dof)

    def test_non_dividing_rejected(self):
        """Test coarse sizes must divide the fine sizes"""
        fine = build_fine_mesh(10, 10)
        with pytest.raises(GeometryError, match='does not divide'):
            build_coarse_grid(fine, build_fracture_mesh([], fine), 3, 3)


class TestOversample:

    def setup_method(self):
        fine = build_fine_mesh(10, 10)
        self.cg = build_coarse_grid(fine, build_fracture_mesh([], fine), 5, 5)

    def test_interior_region(self):
        """Test (2S+1)^2 coarse cells for an interior cell"""
        assert len(oversample(self.cg, 12, 1).coarse_cells) == 9
        assert len(oversample(self.cg, 12, 2).coarse_cells) == 25

    def test_corner_region_clipped(self):
        """Test clipping at a corner"""
        region = oversample(self.cg, 0, 1)
        assert sorted(region.coarse_cells.tolist()) == [0, 1, 5, 6]
        assert region.n_local_matrix == 16

    def test_four_layers_on_forty_grid(self):
        """Test an interior cell of a 40x40 coarse grid with S=4"""
        fine = build_fine_mesh(40, 40)
        cg = build_coarse_grid(fine, build_fracture_mesh([], fine), 40, 40)
        assert len(oversample(cg, 20 * 40 + 20, 4).coarse_cells) == 81

    def test_monotone_in_layers(self):
        """Test K+(S) is contained in K+(S+1)"""
        for s in range(1, 4):
            small = set(oversample(self.cg, 7, s).coarse_cells.tolist())
            large = set(oversample(self.cg, 7, s + 1).coarse_cells.tolist())
            assert small <= large

    def test_invalid_layers(self):
        """Test S must be at least one"""
        with pytest.raises(GeometryError):
            oversample(self.cg, 0, 0)
