"""Shared fixtures: small datasets and trained models reused across modules."""

import numpy as np
import pytest

from ctsel import datagen, models, uncertainty


@pytest.fixture(scope="session")
def covid_small():
    return datagen.generate_dataset("covid", sizes=(48, 16, 16), master_seed=101)


@pytest.fixture(scope="session")
def cvs_small():
    return datagen.generate_dataset("cvs", sizes=(32, 8, 8), master_seed=102)


@pytest.fixture(scope="session")
def trained_crn(covid_small):
    model = models.SurrogateModel.create("crn-lite", d_x=3,
                                         rng=np.random.default_rng(7))
    models.train(model, covid_small,
                 models.TrainConfig(epochs=30, batch_size=32, seed=7, patience=30))
    return model


@pytest.fixture(scope="session")
def trained_gnet(covid_small):
    model = models.SurrogateModel.create("gnet-lite", d_x=3,
                                         rng=np.random.default_rng(8))
    models.train(model, covid_small,
                 models.TrainConfig(epochs=30, batch_size=32, seed=8, patience=30))
    return model


@pytest.fixture(scope="session")
def mc_handle(trained_crn):
    return uncertainty.EnsembleHandle(method="mc-dropout", members=[trained_crn])
