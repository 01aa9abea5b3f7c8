# Recommender services: dataset, graphs, encoder, objectives, engine, evaluation, checkpoints
