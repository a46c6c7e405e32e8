"""
Shared fixtures for the capalloc tests.
"""
import numpy as np
import pytest

from models.portfolio import random_two_entity_portfolio, save_portfolio, table1_portfolio


@pytest.fixture
def table1():
    return table1_portfolio()


@pytest.fixture
def table1_file(tmp_path, table1):
    return save_portfolio(table1, tmp_path / "table1.json")


@pytest.fixture
def two_entity():
    return random_two_entity_portfolio(np.random.default_rng(11))
