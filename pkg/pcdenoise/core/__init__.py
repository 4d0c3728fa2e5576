"""Core geometry, learning and evaluation modules"""
