"""Markovian random dynamical systems on intervals and circles."""
